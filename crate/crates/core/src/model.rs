//! Whole-network evaluation.
//!
//! Two paths compute the same function. [`Network::infer_image`] follows the
//! halting algorithms literally on one image at a time: units past the halt
//! are never run, later SACT units are perforated, and batch norm reads its
//! running statistics. [`forward_graph`] records a batch on an autodiff
//! tape for training: every unit that any example still needs is evaluated
//! densely and the active set is applied by selection, with halting
//! decisions entering as constant masks.

use crate::act::{act_block_forward, ActHalting};
use crate::arch::HaltingMode;
use crate::autodiff::{FieldMask, Graph, Var};
use crate::error::{Error, Result};
use crate::flops::{EvalRecord, UnitRecord};
use crate::kernels::{BatchStats, BnMode};
use crate::network::{BatchNormParams, BlockHalting, Network, ResidualUnitParams};
use crate::sact::{sact_block_forward, PonderMap, SactHalting};
use crate::tensor::{lit, ActiveMask, ConvSpec, Scalar, Tensor};

/// Summary of one block on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutcome<T> {
    pub ponder: T,
    /// Mean over positions of the evaluated-unit count.
    pub mean_units: f64,
    pub ponder_map: PonderMap<T>,
    /// Whether the block's last unit received a nonzero halting weight.
    pub last_unit_used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome<T> {
    pub logits: Vec<T>,
    pub blocks: Vec<BlockOutcome<T>>,
    pub record: EvalRecord,
}

impl<T: Scalar> ImageOutcome<T> {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn unit_prefix(k: usize, l: usize) -> String {
    format!("block{}.unit{}", k + 1, l + 1)
}

pub(crate) fn halt_prefix(k: usize, l: usize) -> String {
    format!("block{}.halt{}", k + 1, l + 1)
}

/// Shifted mean used for every ponder average, exact on constant fields.
pub(crate) fn field_mean<T: Scalar>(values: &[T]) -> T {
    let m = values.iter().fold(T::infinity(), |a, &b| a.min(b));
    let s = values.iter().fold(T::zero(), |a, &b| a + (b - m));
    m + s / lit::<T>(values.len() as f64)
}

impl<T: Scalar> Network<T> {
    /// Runs one `(1, H, W, C)` image with learned halting scores.
    pub fn infer_image(&self, image: &Tensor<T>) -> Result<ImageOutcome<T>> {
        self.infer_image_with(image, None)
    }

    /// Like [`Network::infer_image`], optionally pinning every block's halting
    /// scores (units `1..L-1`) to fixed values.
    pub fn infer_image_with(&self, image: &Tensor<T>, pinned: Option<&[Vec<T>]>) -> Result<ImageOutcome<T>> {
        image.expect_dims(0, 1, "network input", "batch")?;
        if let Some(p) = pinned {
            if p.len() != self.blocks.len() {
                return Err(Error::dim("pinned halting scores", "blocks", self.blocks.len(), p.len()));
            }
        }
        let eps = self.spec.epsilon;
        let mut x = self.stem_forward(image)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut record = EvalRecord::default();
        for (k, block) in self.blocks.iter().enumerate() {
            let big_l = block.units.len();
            let fixed = pinned.map(|p| p[k].as_slice());
            let mode = match (&block.halting, fixed) {
                (BlockHalting::None, None) => None,
                (BlockHalting::Sact(_), _) => Some(HaltingMode::Sact),
                _ => Some(HaltingMode::Act),
            };
            match mode {
                None => {
                    let mut units = Vec::with_capacity(big_l);
                    for unit in &block.units {
                        let in_pos = (x.height() * x.width()) as u64;
                        x = unit.forward(&x, BnMode::Infer)?;
                        let out_pos = (x.height() * x.width()) as u64;
                        units.push(UnitRecord {
                            evaluated: true,
                            active_positions: out_pos,
                            conv1_positions: in_pos,
                            halting_positions: 0,
                        });
                    }
                    let ponder = lit::<T>(big_l as f64 + 1.0);
                    blocks.push(BlockOutcome {
                        ponder,
                        mean_units: big_l as f64,
                        ponder_map: constant_map(k, x.height(), x.width(), ponder),
                        last_unit_used: true,
                    });
                    record.blocks.push(units);
                }
                Some(HaltingMode::Act) => {
                    let halting = match (&block.halting, fixed) {
                        (_, Some(s)) => ActHalting::Fixed(s),
                        (BlockHalting::Act(p), None) => ActHalting::Learned(p),
                        _ => unreachable!("plain blocks without pinned scores are handled above"),
                    };
                    let r = act_block_forward(&x, &block.units, halting, eps)?;
                    x = r.output;
                    blocks.push(BlockOutcome {
                        ponder: r.ponder,
                        mean_units: r.units as f64,
                        ponder_map: constant_map(k, x.height(), x.width(), r.ponder),
                        last_unit_used: r.distribution[big_l - 1] > T::zero(),
                    });
                    record.blocks.push(r.records);
                }
                Some(_) => {
                    let halting = match (&block.halting, fixed) {
                        (_, Some(s)) => SactHalting::Fixed(s),
                        (BlockHalting::Sact(p), None) => SactHalting::Learned(p),
                        _ => unreachable!("only SACT blocks reach here"),
                    };
                    let r = sact_block_forward(&x, &block.units, halting, eps, self.spec.tile)?;
                    x = r.output;
                    let st = &r.state;
                    let mean_units = st.units.iter().sum::<usize>() as f64 / st.units.len() as f64;
                    let last_unit_used = st
                        .units
                        .iter()
                        .zip(&st.remainder)
                        .any(|(&n, &rem)| n == big_l && rem > T::zero());
                    let mut ponder_map = r.ponder_map;
                    ponder_map.block = k;
                    blocks.push(BlockOutcome {
                        ponder: r.ponder,
                        mean_units,
                        ponder_map,
                        last_unit_used,
                    });
                    record.blocks.push(r.records);
                }
            }
        }
        let logits = self.head_forward(&x, BnMode::Infer)?;
        Ok(ImageOutcome {
            logits: logits.data().to_vec(),
            blocks,
            record,
        })
    }

    /// Logits `(B, 1, 1, K)` for a batch, evaluated image by image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let items = (0..images.batch())
            .map(|b| {
                let out = self.infer_image(&images.batch_item(b))?;
                Tensor::from_vec([1, 1, 1, out.logits.len()], out.logits)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }
}

fn constant_map<T: Scalar>(block: usize, height: usize, width: usize, value: T) -> PonderMap<T> {
    PonderMap {
        block,
        height,
        width,
        values: vec![value; height * width],
    }
}

/// Runs the halting recursion on the tape over a field of positions:
/// extent `1 x 1` per example for ACT, `H x W` for SACT.
///
/// Every step takes the unit output and its halting score node (none for
/// the block's last unit, whose score is 1). The comparisons against
/// `1 - epsilon` are made on forward values and become constant masks, so
/// gradients reach the scores only through the halting weights and the
/// remainder.
pub struct HaltingAccumulator<T> {
    batch: usize,
    height: usize,
    width: usize,
    threshold: T,
    cumulative: Vec<T>,
    active: Vec<bool>,
    counts: Vec<usize>,
    remainder: Var,
    output: Option<Var>,
    last_weights: Vec<T>,
    /// Smallest `|c - (1 - epsilon)|` seen over learned-score comparisons.
    pub min_margin: f64,
    /// Continue/halt decision of every comparison, in order.
    pub signature: Vec<bool>,
}

impl<T: Scalar> HaltingAccumulator<T> {
    pub fn new(g: &mut Graph<T>, batch: usize, height: usize, width: usize, epsilon: f64) -> Self {
        let n = batch * height * width;
        HaltingAccumulator {
            batch,
            height,
            width,
            threshold: T::one() - lit::<T>(epsilon),
            cumulative: vec![T::zero(); n],
            active: vec![true; n],
            counts: vec![0; n],
            remainder: g.constant(Tensor::full([batch, height, width, 1], T::one())),
            output: None,
            last_weights: vec![T::zero(); n],
            min_margin: f64::INFINITY,
            signature: Vec::new(),
        }
    }

    pub fn any_active(&self) -> bool {
        self.active.iter().any(|&a| a)
    }

    pub fn active_mask(&self) -> FieldMask {
        FieldMask::new(self.batch, self.height, self.width, self.active.clone())
    }

    /// Active flags of one example.
    pub fn example_mask(&self, b: usize) -> ActiveMask {
        let n = self.height * self.width;
        ActiveMask::from_flags(self.height, self.width, self.active[b * n..(b + 1) * n].to_vec())
            .expect("mask extent")
    }

    /// Units evaluated at each position so far.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Halting weight each position gave the most recent step it took part in.
    pub fn last_weights(&self) -> &[T] {
        &self.last_weights
    }

    pub fn step(&mut self, g: &mut Graph<T>, x: Var, h: Option<Var>) -> Result<()> {
        let scores: Option<Vec<T>> = match h {
            Some(v) => {
                let hv = g.value(v);
                hv.expect_shape([self.batch, self.height, self.width, 1], "halting scores")?;
                Some(hv.data().to_vec())
            }
            None => None,
        };
        let n = self.active.len();
        let mut cont = vec![false; n];
        let mut halt = vec![false; n];
        for p in 0..n {
            if !self.active[p] {
                continue;
            }
            let hv = scores.as_ref().map_or(T::one(), |s| s[p]);
            self.cumulative[p] += hv;
            self.counts[p] += 1;
            if scores.is_some() {
                let margin = (self.cumulative[p] - self.threshold).abs().as_f64();
                self.min_margin = self.min_margin.min(margin);
            }
            if self.cumulative[p] < self.threshold {
                cont[p] = true;
            } else {
                halt[p] = true;
            }
            self.signature.push(cont[p]);
        }
        let rem_vals = g.value(self.remainder).data().to_vec();
        for p in 0..n {
            if cont[p] {
                self.last_weights[p] = scores.as_ref().map_or(T::one(), |s| s[p]);
            } else if halt[p] {
                self.last_weights[p] = rem_vals[p];
            }
        }
        let (b, hh, ww) = (self.batch, self.height, self.width);
        let halt_mask = FieldMask::new(b, hh, ww, halt.clone());
        let from_remainder = g.mul_mask(self.remainder, halt_mask)?;
        let (weight, kept) = match h {
            Some(hv) => {
                let cont_mask = FieldMask::new(b, hh, ww, cont);
                let kept = g.mul_mask(hv, cont_mask)?;
                (g.add(kept, from_remainder)?, Some(kept))
            }
            None => (from_remainder, None),
        };
        let contribution = g.scale_by_field(x, weight)?;
        let previous = match self.output {
            Some(o) => o,
            None => {
                let shape = g.value(x).shape();
                g.constant(Tensor::zeros(shape))
            }
        };
        self.output = Some(g.add(previous, contribution)?);
        if let Some(kept) = kept {
            self.remainder = g.sub(self.remainder, kept)?;
        }
        for p in 0..n {
            if halt[p] {
                self.active[p] = false;
            }
        }
        Ok(())
    }

    /// Block output and the per-position ponder field `N + R`.
    pub fn finish(self, g: &mut Graph<T>) -> Result<(Var, Var)> {
        let output = self
            .output
            .ok_or_else(|| Error::InvalidArgument("halting accumulator finished before any step".into()))?;
        let counts = Tensor::from_vec(
            [self.batch, self.height, self.width, 1],
            self.counts.iter().map(|&c| lit::<T>(c as f64)).collect(),
        )?;
        let ponder = g.add_const(self.remainder, &counts)?;
        Ok((output, ponder))
    }
}

/// Per-block statistics of a taped forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBlockStats<T> {
    /// Ponder cost of each example.
    pub ponder: Vec<T>,
    pub mean_units: Vec<f64>,
    pub last_unit_used: Vec<bool>,
    /// `(B, H, W, 1)` per-position ponder costs.
    pub ponder_field: Tensor<T>,
}

pub struct GraphForward<T> {
    pub logits: Var,
    pub task_loss: Var,
    /// Scalar batch-mean ponder cost of each block; empty without halting.
    pub block_ponders: Vec<Var>,
    /// `task_loss + tau * sum(block_ponders)`.
    pub loss: Var,
    pub blocks: Vec<GraphBlockStats<T>>,
    /// Batch statistics of every train-mode batch norm, keyed by name prefix.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
    /// Evaluation record of each example.
    pub records: Vec<EvalRecord>,
    pub min_margin: f64,
    pub signature: Vec<bool>,
}

struct Taper<'a, T> {
    g: &'a mut Graph<T>,
    mode: BnMode,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Taper<'_, T> {
    fn vector(&mut self, name: &str, data: &[T]) -> Var {
        match self.g.param_var(name) {
            Some(v) => v,
            None => self.g.param(name, &Tensor::from_vec([1, 1, 1, data.len()], data.to_vec()).expect("vector")),
        }
    }

    fn tensor(&mut self, name: &str, t: &Tensor<T>) -> Var {
        self.g.param(name, t)
    }

    fn bn_relu(&mut self, prefix: &str, bn: &BatchNormParams<T>, x: Var) -> Result<Var> {
        let scale = self.vector(&format!("{prefix}.scale"), &bn.scale);
        let offset = self.vector(&format!("{prefix}.offset"), &bn.offset);
        let y = match self.mode {
            BnMode::Train => {
                let (y, stats) = self.g.batch_norm_train(x, scale, offset)?;
                self.bn_stats.push((prefix.to_string(), stats));
                y
            }
            BnMode::Infer => {
                let r = bn
                    .running
                    .as_ref()
                    .ok_or_else(|| Error::UninitializedRunningStats(prefix.to_string()))?;
                self.g.batch_norm_infer(x, scale, offset, &r.mean, &r.var)?
            }
        };
        Ok(self.g.relu(y))
    }

    fn conv(&mut self, name: &str, kernel: &Tensor<T>, spec: ConvSpec, x: Var) -> Result<Var> {
        let k = self.tensor(name, kernel);
        self.g.conv2d(x, k, spec)
    }

    fn unit(&mut self, prefix: &str, unit: &ResidualUnitParams<T>, x: Var) -> Result<Var> {
        let pre = self.bn_relu(&format!("{prefix}.bn1"), &unit.bn1, x)?;
        let shortcut = match &unit.projection {
            Some(p) => self.conv(&format!("{prefix}.projection.kernel"), &p.kernel, p.spec, pre)?,
            None => x,
        };
        let r = self.conv(&format!("{prefix}.conv1.kernel"), &unit.conv1.kernel, unit.conv1.spec, pre)?;
        let r = self.bn_relu(&format!("{prefix}.bn2"), &unit.bn2, r)?;
        let r = self.conv(&format!("{prefix}.conv2.kernel"), &unit.conv2.kernel, unit.conv2.spec, r)?;
        let r = self.bn_relu(&format!("{prefix}.bn3"), &unit.bn3, r)?;
        let r = self.conv(&format!("{prefix}.conv3.kernel"), &unit.conv3.kernel, unit.conv3.spec, r)?;
        self.g.add(shortcut, r)
    }

    /// `W . pool(x) + b` as a `(B, 1, 1, 1)` node.
    fn pooled_logit(&mut self, prefix: &str, weight: &[T], bias: T, x: Var) -> Result<Var> {
        let c = weight.len();
        let w = self.tensor(
            &format!("{prefix}.weight"),
            &Tensor::from_vec([1, 1, c, 1], weight.to_vec())?,
        );
        let b = self.vector(&format!("{prefix}.bias"), &[bias]);
        let pooled = self.g.global_avg_pool(x)?;
        let z = self.g.conv2d(pooled, w, ConvSpec::new(1, c, 1, 1))?;
        self.g.bias_add(z, b)
    }
}

fn dilated_count(mask: &ActiveMask) -> u64 {
    mask.dilate3x3().count() as u64
}

/// Tapes a batch forward pass with loss `CE + tau * sum_k mean_b rho_k`.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: BnMode,
    tau: f64,
) -> Result<GraphForward<T>> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be non-negative, got {tau}")));
    }
    let batch = images.batch();
    if labels.len() != batch {
        return Err(Error::dim("labels", "batch", batch, labels.len()));
    }
    images.expect_dims(3, net.spec.input_channels, "network input", "channels")?;
    let eps = net.spec.epsilon;
    let mut t = Taper {
        g,
        mode,
        bn_stats: Vec::new(),
    };
    let input = t.g.constant(images.clone());
    let stem = t.conv("stem.kernel", &net.stem.kernel, net.stem.spec, input)?;
    let mut x = t.g.max_pool(stem);

    let mut records = vec![EvalRecord::default(); batch];
    let mut blocks = Vec::new();
    let mut block_ponders = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut signature = Vec::new();

    for (k, block) in net.blocks.iter().enumerate() {
        let big_l = block.units.len();
        for r in records.iter_mut() {
            r.blocks.push(vec![UnitRecord::default(); big_l]);
        }
        if let BlockHalting::None = block.halting {
            for (l, unit) in block.units.iter().enumerate() {
                let in_pos = {
                    let v = t.g.value(x);
                    (v.height() * v.width()) as u64
                };
                x = t.unit(&unit_prefix(k, l), unit, x)?;
                let v = t.g.value(x);
                let out_pos = (v.height() * v.width()) as u64;
                for r in records.iter_mut() {
                    r.blocks[k][l] = UnitRecord {
                        evaluated: true,
                        active_positions: out_pos,
                        conv1_positions: in_pos,
                        halting_positions: 0,
                    };
                }
            }
            let v = t.g.value(x);
            let (h, w) = (v.height(), v.width());
            let ponder = lit::<T>(big_l as f64 + 1.0);
            blocks.push(GraphBlockStats {
                ponder: vec![ponder; batch],
                mean_units: vec![big_l as f64; batch],
                last_unit_used: vec![true; batch],
                ponder_field: Tensor::full([batch, h, w, 1], ponder),
            });
            continue;
        }

        let spatial = matches!(block.halting, BlockHalting::Sact(_));
        let mut acc: Option<HaltingAccumulator<T>> = None;
        let mut x_hat = x;
        let mut in_pos = {
            let v = t.g.value(x);
            (v.height() * v.width()) as u64
        };
        for (l, unit) in block.units.iter().enumerate() {
            if acc.as_ref().is_some_and(|a| !a.any_active()) {
                break;
            }
            let dense = t.unit(&unit_prefix(k, l), unit, x_hat)?;
            let xv = match &acc {
                Some(a) => t.g.select(a.active_mask(), dense, x_hat)?,
                None => dense,
            };
            let (h, w) = {
                let v = t.g.value(xv);
                (v.height(), v.width())
            };
            let a = acc.get_or_insert_with(|| {
                if spatial {
                    HaltingAccumulator::new(t.g, batch, h, w, eps)
                } else {
                    HaltingAccumulator::new(t.g, batch, 1, 1, eps)
                }
            });
            let has_score = l + 1 < big_l;
            for (b, r) in records.iter_mut().enumerate() {
                let m = a.example_mask(b);
                if !m.any() {
                    continue;
                }
                let active = if spatial { m.count() as u64 } else { (h * w) as u64 };
                let conv1 = if l == 0 {
                    in_pos
                } else if spatial {
                    dilated_count(&m)
                } else {
                    (h * w) as u64
                };
                r.blocks[k][l] = UnitRecord {
                    evaluated: true,
                    active_positions: active,
                    conv1_positions: conv1,
                    halting_positions: match (has_score, spatial) {
                        (false, _) => 0,
                        (true, true) => active,
                        (true, false) => 1,
                    },
                };
            }
            let score = if has_score {
                let prefix = halt_prefix(k, l);
                let z = match &block.halting {
                    BlockHalting::Act(p) => t.pooled_logit(&prefix, &p[l].weight, p[l].bias, xv)?,
                    BlockHalting::Sact(p) => {
                        let c = p[l].weight.len();
                        let wt = t.tensor(&format!("{prefix}.spatial"), &p[l].spatial);
                        let local = t.g.conv2d(xv, wt, ConvSpec::new(3, c, 1, 1))?;
                        let w = t.tensor(
                            &format!("{prefix}.weight"),
                            &Tensor::from_vec([1, 1, c, 1], p[l].weight.clone())?,
                        );
                        let b = t.vector(&format!("{prefix}.bias"), &[p[l].bias]);
                        let pooled = t.g.global_avg_pool(xv)?;
                        let pz = t.g.conv2d(pooled, w, ConvSpec::new(1, c, 1, 1))?;
                        let z = t.g.add_spatial_broadcast(local, pz)?;
                        t.g.bias_add(z, b)?
                    }
                    BlockHalting::None => unreachable!("plain blocks handled above"),
                };
                let hs = t.g.sigmoid(z);
                Some(if spatial && net.spec.tile > 1 {
                    t.g.tile_average(hs, net.spec.tile)?
                } else {
                    hs
                })
            } else {
                None
            };
            a.step(t.g, xv, score)?;
            x_hat = xv;
            in_pos = (h * w) as u64;
        }
        let a = acc.expect("blocks have at least one unit");
        min_margin = min_margin.min(a.min_margin);
        signature.extend_from_slice(&a.signature);
        let (hh, ww) = (a.height, a.width);
        let counts = a.counts().to_vec();
        let last = a.last_weights().to_vec();
        let (out, ponder_field) = a.finish(t.g)?;
        x = out;

        let field = t.g.value(ponder_field).clone();
        let n = hh * ww;
        let ponder: Vec<T> = (0..batch).map(|b| field_mean(&field.data()[b * n..(b + 1) * n])).collect();
        let mean_units = (0..batch)
            .map(|b| counts[b * n..(b + 1) * n].iter().sum::<usize>() as f64 / n as f64)
            .collect();
        let last_unit_used = (0..batch)
            .map(|b| (b * n..(b + 1) * n).any(|p| counts[p] == big_l && last[p] > T::zero()))
            .collect();
        let total = t.g.sum(ponder_field);
        block_ponders.push(t.g.scale(total, lit::<T>(1.0 / (batch * n) as f64)));
        blocks.push(GraphBlockStats {
            ponder,
            mean_units,
            last_unit_used,
            ponder_field: field,
        });
    }

    let fin = t.bn_relu("final_bn", &net.final_bn, x)?;
    let [_, _, c, classes] = net.head.weight.shape();
    let pooled = t.g.global_avg_pool(fin)?;
    let fc = t.tensor("fc.weight", &net.head.weight);
    let z = t.g.conv2d(pooled, fc, ConvSpec::new(1, c, classes, 1))?;
    let fb = t.vector("fc.bias", &net.head.bias);
    let logits = t.g.bias_add(z, fb)?;
    let task_loss = t.g.softmax_cross_entropy(logits, labels)?;
    let loss = match block_ponders.split_first() {
        None => task_loss,
        Some((&first, rest)) => {
            let mut total = first;
            for &p in rest {
                total = t.g.add(total, p)?;
            }
            let scaled = t.g.scale(total, lit::<T>(tau));
            t.g.add(task_loss, scaled)?
        }
    };
    let bn_stats = t.bn_stats;
    Ok(GraphForward {
        logits,
        task_loss,
        block_ponders,
        loss,
        blocks,
        bn_stats,
        records,
        min_margin,
        signature,
    })
}
