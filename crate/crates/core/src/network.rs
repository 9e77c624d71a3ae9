//! Pre-activation bottleneck residual networks: parameters, residual unit
//! evaluation and the classifier head.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{HaltingMode, NetworkSpec};
use crate::error::{Error, Result};
use crate::kernels::{self, BnMode, RunningStats};
use crate::tensor::{lit, ConvSpec, Scalar, Tensor};

/// Initial bias of every halting-score unit. `1 / sigmoid(-3)` is about 21,
/// so at initialization no block halts before its last unit.
pub const HALTING_BIAS_INIT: f64 = -3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub scale: Vec<T>,
    pub offset: Vec<T>,
    pub running: Option<RunningStats<T>>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            scale: vec![T::one(); channels],
            offset: vec![T::zero(); channels],
            running: Some(RunningStats::new(channels)),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Normalizes with running statistics (infer) or batch statistics
    /// (train, without touching the running averages).
    pub fn apply(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        match mode {
            BnMode::Train => {
                let s = kernels::batch_stats(x);
                kernels::batch_norm_apply(x, &self.scale, &self.offset, &s.mean, &s.var)
            }
            BnMode::Infer => {
                let r = self
                    .running
                    .as_ref()
                    .ok_or_else(|| Error::UninitializedRunningStats("batch norm".into()))?;
                kernels::batch_norm_apply(x, &self.scale, &self.offset, &r.mean, &r.var)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub spec: ConvSpec,
    pub kernel: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        ConvLayer {
            kernel: Tensor::zeros(spec.kernel_shape()),
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::conv2d(x, &self.kernel, &self.spec)
    }
}

/// One bottleneck unit `x + f(x)`, with `f` = BN-ReLU-1x1, BN-ReLU-3x3,
/// BN-ReLU-1x1. The stride sits on the 3x3 layer. When the unit changes
/// shape, the shortcut is a strided 1x1 conv applied to the output of the
/// first BN-ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualUnitParams<T> {
    pub bn1: BatchNormParams<T>,
    pub conv1: ConvLayer<T>,
    pub bn2: BatchNormParams<T>,
    pub conv2: ConvLayer<T>,
    pub bn3: BatchNormParams<T>,
    pub conv3: ConvLayer<T>,
    pub projection: Option<ConvLayer<T>>,
}

impl<T: Scalar> ResidualUnitParams<T> {
    /// Unit with identity batch norms and all-zero kernels.
    pub fn zeros(in_channels: usize, width: usize, out_channels: usize, stride: usize) -> Self {
        let projection =
            (stride != 1 || in_channels != out_channels).then(|| ConvLayer::zeros(ConvSpec::new(1, in_channels, out_channels, stride)));
        ResidualUnitParams {
            bn1: BatchNormParams::identity(in_channels),
            conv1: ConvLayer::zeros(ConvSpec::new(1, in_channels, width, 1)),
            bn2: BatchNormParams::identity(width),
            conv2: ConvLayer::zeros(ConvSpec::new(3, width, width, stride)),
            bn3: BatchNormParams::identity(width),
            conv3: ConvLayer::zeros(ConvSpec::new(1, width, out_channels, 1)),
            projection,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.spec.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.spec.out_channels
    }

    pub fn stride(&self) -> usize {
        self.conv2.spec.stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection.is_none() && (self.stride() != 1 || self.in_channels() != self.out_channels()) {
            return Err(Error::InvalidArgument(
                "units that change shape need a projection shortcut".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        x.expect_dims(3, self.in_channels(), "residual unit input", "channels")?;
        let pre = kernels::relu(&self.bn1.apply(x, mode)?);
        let shortcut = match &self.projection {
            Some(p) => p.forward(&pre)?,
            None => x.clone(),
        };
        let r = self.conv1.forward(&pre)?;
        let r = self.conv2.forward(&kernels::relu(&self.bn2.apply(&r, mode)?))?;
        let r = self.conv3.forward(&kernels::relu(&self.bn3.apply(&r, mode)?))?;
        shortcut.add(&r)
    }

    /// Dense FLOPs of the three residual convolutions and the projection at
    /// the given input resolution.
    pub fn conv_specs(&self) -> Vec<&ConvSpec> {
        let mut v = vec![&self.conv1.spec, &self.conv2.spec, &self.conv3.spec];
        if let Some(p) = &self.projection {
            v.push(&p.spec);
        }
        v
    }
}

/// ACT halting unit: `sigmoid(W . pool(x) + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltingUnitParams<T> {
    pub weight: Vec<T>,
    pub bias: T,
}

/// SACT halting unit: `sigmoid(conv3x3(x) + W . pool(x) + b)` per position.
#[derive(Debug, Clone, PartialEq)]
pub struct SactHaltingParams<T> {
    /// `[3, 3, C, 1]` kernel.
    pub spatial: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> SactHaltingParams<T> {
    /// The ACT halting unit with the same pooled weights and bias.
    pub fn pooled_part(&self) -> HaltingUnitParams<T> {
        HaltingUnitParams {
            weight: self.weight.clone(),
            bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockHalting<T> {
    None,
    Act(Vec<HaltingUnitParams<T>>),
    Sact(Vec<SactHaltingParams<T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub units: Vec<ResidualUnitParams<T>>,
    /// One halting unit per residual unit except the last.
    pub halting: BlockHalting<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    /// `[1, 1, C, K]`
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    /// Global average pool followed by an affine map to logits `(B, 1, 1, K)`.
    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = kernels::global_avg_pool(features)?;
        let [_, _, c, k] = self.weight.shape();
        let logits = kernels::conv2d(&pooled, &self.weight, &ConvSpec::new(1, c, k, 1))?;
        let mut out = logits;
        for px in out.data_mut().chunks_exact_mut(k) {
            for (v, &b) in px.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// Role of a stored tensor; decides decay, training and two-stage copying.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    BnScale,
    BnOffset,
    BnMean,
    BnVar,
    HaltingWeight,
    HaltingSpatial,
    HaltingBias,
    FcWeight,
    FcBias,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }

    pub fn is_halting(self) -> bool {
        matches!(self, ParamKind::HaltingWeight | ParamKind::HaltingSpatial | ParamKind::HaltingBias)
    }

    /// Weight decay applies to every trainable tensor except halting biases.
    pub fn decays(self) -> bool {
        self.is_trainable() && self != ParamKind::HaltingBias
    }
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 4],
    pub data: &'a mut [T],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub stem: ConvLayer<T>,
    pub blocks: Vec<Block<T>>,
    pub final_bn: BatchNormParams<T>,
    pub head: ClassifierHead<T>,
}

fn vec_shape(len: usize) -> [usize; 4] {
    [1, 1, 1, len]
}

fn push_bn<'a, T>(out: &mut Vec<ParamMut<'a, T>>, prefix: &str, bn: &'a mut BatchNormParams<T>) {
    let n = bn.scale.len();
    out.push(ParamMut {
        name: format!("{prefix}.scale"),
        kind: ParamKind::BnScale,
        shape: vec_shape(n),
        data: &mut bn.scale,
    });
    out.push(ParamMut {
        name: format!("{prefix}.offset"),
        kind: ParamKind::BnOffset,
        shape: vec_shape(n),
        data: &mut bn.offset,
    });
    if let Some(r) = &mut bn.running {
        out.push(ParamMut {
            name: format!("{prefix}.mean"),
            kind: ParamKind::BnMean,
            shape: vec_shape(n),
            data: &mut r.mean,
        });
        out.push(ParamMut {
            name: format!("{prefix}.var"),
            kind: ParamKind::BnVar,
            shape: vec_shape(n),
            data: &mut r.var,
        });
    }
}

fn push_tensor<'a, T>(out: &mut Vec<ParamMut<'a, T>>, name: String, kind: ParamKind, t: &'a mut Tensor<T>) {
    let shape = t.shape();
    out.push(ParamMut {
        name,
        kind,
        shape,
        data: t.data_mut(),
    });
}

impl<T: Scalar> Network<T> {
    /// Every stored tensor with its checkpoint name, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        push_tensor(&mut out, "stem.kernel".into(), ParamKind::Kernel, &mut self.stem.kernel);
        for (k, block) in self.blocks.iter_mut().enumerate() {
            for (l, unit) in block.units.iter_mut().enumerate() {
                let p = format!("block{}.unit{}", k + 1, l + 1);
                push_bn(&mut out, &format!("{p}.bn1"), &mut unit.bn1);
                push_tensor(&mut out, format!("{p}.conv1.kernel"), ParamKind::Kernel, &mut unit.conv1.kernel);
                push_bn(&mut out, &format!("{p}.bn2"), &mut unit.bn2);
                push_tensor(&mut out, format!("{p}.conv2.kernel"), ParamKind::Kernel, &mut unit.conv2.kernel);
                push_bn(&mut out, &format!("{p}.bn3"), &mut unit.bn3);
                push_tensor(&mut out, format!("{p}.conv3.kernel"), ParamKind::Kernel, &mut unit.conv3.kernel);
                if let Some(proj) = &mut unit.projection {
                    push_tensor(&mut out, format!("{p}.projection.kernel"), ParamKind::Kernel, &mut proj.kernel);
                }
            }
            let halting_prefix = |l: usize| format!("block{}.halt{}", k + 1, l + 1);
            match &mut block.halting {
                BlockHalting::None => {}
                BlockHalting::Act(hs) => {
                    for (l, h) in hs.iter_mut().enumerate() {
                        let p = halting_prefix(l);
                        let n = h.weight.len();
                        out.push(ParamMut {
                            name: format!("{p}.weight"),
                            kind: ParamKind::HaltingWeight,
                            shape: [1, 1, n, 1],
                            data: &mut h.weight,
                        });
                        out.push(ParamMut {
                            name: format!("{p}.bias"),
                            kind: ParamKind::HaltingBias,
                            shape: [1, 1, 1, 1],
                            data: std::slice::from_mut(&mut h.bias),
                        });
                    }
                }
                BlockHalting::Sact(hs) => {
                    for (l, h) in hs.iter_mut().enumerate() {
                        let p = halting_prefix(l);
                        push_tensor(&mut out, format!("{p}.spatial"), ParamKind::HaltingSpatial, &mut h.spatial);
                        let n = h.weight.len();
                        out.push(ParamMut {
                            name: format!("{p}.weight"),
                            kind: ParamKind::HaltingWeight,
                            shape: [1, 1, n, 1],
                            data: &mut h.weight,
                        });
                        out.push(ParamMut {
                            name: format!("{p}.bias"),
                            kind: ParamKind::HaltingBias,
                            shape: [1, 1, 1, 1],
                            data: std::slice::from_mut(&mut h.bias),
                        });
                    }
                }
            }
        }
        push_bn(&mut out, "final_bn", &mut self.final_bn);
        push_tensor(&mut out, "fc.weight".into(), ParamKind::FcWeight, &mut self.head.weight);
        let n = self.head.bias.len();
        out.push(ParamMut {
            name: "fc.bias".into(),
            kind: ParamKind::FcBias,
            shape: vec_shape(n),
            data: &mut self.head.bias,
        });
        out
    }

    /// Owned copies of every stored tensor, in `params_mut` order.
    pub fn named_params(&self) -> Vec<(String, ParamKind, Tensor<T>)> {
        let mut copy = self.clone();
        copy.params_mut()
            .into_iter()
            .map(|p| {
                let t = Tensor::from_vec(p.shape, p.data.to_vec()).expect("param shape");
                (p.name, p.kind, t)
            })
            .collect()
    }

    /// Network with identity batch norms and all-zero weights; halting
    /// biases start at -3.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let stem = ConvLayer::zeros(ConvSpec::new(spec.stem_kernel, spec.input_channels, spec.stem_width, 2));
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (k, b) in spec.blocks.iter().enumerate() {
            let out_c = spec.block_out_channels(k);
            let units = (0..b.units)
                .map(|l| {
                    let (in_c, stride) = if l == 0 {
                        (spec.block_in_channels(k), b.stride)
                    } else {
                        (out_c, 1)
                    };
                    ResidualUnitParams::zeros(in_c, b.width, out_c, stride)
                })
                .collect();
            let bias = lit::<T>(HALTING_BIAS_INIT);
            let n_halt = b.units - 1;
            let halting = match spec.halting {
                HaltingMode::None => BlockHalting::None,
                HaltingMode::Act => BlockHalting::Act(
                    (0..n_halt)
                        .map(|_| HaltingUnitParams {
                            weight: vec![T::zero(); out_c],
                            bias,
                        })
                        .collect(),
                ),
                HaltingMode::Sact => BlockHalting::Sact(
                    (0..n_halt)
                        .map(|_| SactHaltingParams {
                            spatial: Tensor::zeros([3, 3, out_c, 1]),
                            weight: vec![T::zero(); out_c],
                            bias,
                        })
                        .collect(),
                ),
            };
            blocks.push(Block { units, halting });
        }
        let c = spec.final_channels();
        Ok(Network {
            spec: spec.clone(),
            stem,
            blocks,
            final_bn: BatchNormParams::identity(c),
            head: ClassifierHead {
                weight: Tensor::zeros([1, 1, c, spec.classes]),
                bias: vec![T::zero(); spec.classes],
            },
        })
    }

    /// Fresh initialization: variance-scaling normal draws
    /// (`std = sqrt(2 / fan_in)`) for every conv, halting and classifier
    /// weight; unit batch norms; halting biases at -3.
    pub fn random(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        net.reinitialize(rng, |_| true);
        Ok(net)
    }

    /// Redraws the weights selected by `select`; biases and batch-norm
    /// parameters of selected kinds are reset to their initial values.
    pub fn reinitialize(&mut self, rng: &mut impl Rng, select: impl Fn(ParamKind) -> bool) {
        for p in self.params_mut() {
            if !select(p.kind) {
                continue;
            }
            match p.kind {
                ParamKind::Kernel | ParamKind::HaltingSpatial | ParamKind::HaltingWeight | ParamKind::FcWeight => {
                    // kernels are [kh, kw, cin, cout]; fan-in is kh*kw*cin
                    let fan_in = (p.shape[0] * p.shape[1] * p.shape[2]).max(1);
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    for v in p.data.iter_mut() {
                        *v = lit(normal.sample(rng));
                    }
                }
                ParamKind::HaltingBias => p.data.fill(lit(HALTING_BIAS_INIT)),
                ParamKind::BnScale | ParamKind::BnVar => p.data.fill(T::one()),
                ParamKind::BnOffset | ParamKind::BnMean | ParamKind::FcBias => p.data.fill(T::zero()),
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::zeros(&self.spec).expect("spec already validated");
        let src = self.named_params();
        for (dst, (_, _, t)) in out.params_mut().into_iter().zip(src) {
            for (d, s) in dst.data.iter_mut().zip(t.data()) {
                *d = U::from_f64_lossy(s.as_f64());
            }
        }
        out
    }

    /// Stem convolution followed by 3x3 stride-2 max pooling.
    pub fn stem_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_dims(3, self.spec.input_channels, "network input", "channels")?;
        let s = self.stem.forward(x)?;
        Ok(kernels::max_pool(&s).0)
    }

    /// Final BN-ReLU, global pooling and the fully connected layer.
    pub fn head_forward(&self, features: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let f = kernels::relu(&self.final_bn.apply(features, mode)?);
        self.head.forward(&f)
    }
}
