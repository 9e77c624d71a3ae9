//! Synchronous SGD with momentum on the ponder-regularized objective.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::act::ponder_regularized_loss;
use crate::arch::{config_pairs, parse_num, NetworkSpec};
use crate::autodiff::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::flops::{count_flops_adaptive, EvalRecord};
use crate::io::checkpoint::{save_checkpoint, Checkpoint, LoadReport};
use crate::io::dataset::Dataset;
use crate::kernels::{BnMode, BN_DECAY};
use crate::model::{argmax, forward_graph};
use crate::network::{BatchNormParams, Network};
use crate::tensor::{lit, DType, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Factor applied to the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    /// Zero disables the schedule.
    pub decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Running-average decay of batch-norm statistics.
    pub bn_decay: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub precision: DType,
}

impl TrainConfig {
    /// Defaults, with `tau` and `epsilon` taken from the network spec.
    pub fn for_spec(spec: &NetworkSpec) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            lr_decay: 0.1,
            decay_every: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            bn_decay: BN_DECAY,
            tau: spec.tau,
            epsilon: spec.epsilon,
            seed: 0,
            precision: DType::Single,
        }
    }

    /// Reads `train.*` keys of a config file; other keys are ignored.
    pub fn from_config_str(text: &str, spec: &NetworkSpec) -> Result<Self> {
        let mut cfg = Self::for_spec(spec);
        for (line, key, value) in config_pairs(text)? {
            let Some(key) = key.strip_prefix("train.") else {
                continue;
            };
            match key {
                "epochs" => cfg.epochs = parse_num(value, line)?,
                "batch_size" => cfg.batch_size = parse_num(value, line)?,
                "lr" => cfg.lr = parse_num(value, line)?,
                "lr_decay" => cfg.lr_decay = parse_num(value, line)?,
                "decay_every" => cfg.decay_every = parse_num(value, line)?,
                "momentum" => cfg.momentum = parse_num(value, line)?,
                "weight_decay" => cfg.weight_decay = parse_num(value, line)?,
                "bn_decay" => cfg.bn_decay = parse_num(value, line)?,
                "seed" => cfg.seed = parse_num(value, line)?,
                "precision" => {
                    cfg.precision = parse_precision(value).ok_or_else(|| Error::Config {
                        line,
                        message: format!("precision must be single or double, got `{value}`"),
                    })?
                }
                other => {
                    return Err(Error::Config {
                        line,
                        message: format!("unknown training key `train.{other}`"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.tau >= 0.0) {
            return bad(format!("tau must be non-negative, got {}", self.tau));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 for batch statistics".into());
        }
        if !(self.lr > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive; momentum and weight decay non-negative".into());
        }
        if !(self.bn_decay >= 0.0 && self.bn_decay < 1.0) {
            return bad(format!("bn_decay must lie in [0, 1), got {}", self.bn_decay));
        }
        Ok(())
    }

    /// Learning rate during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_every {
            0 => self.lr,
            n => self.lr * self.lr_decay.powi((epoch / n) as i32),
        }
    }
}

pub fn parse_precision(s: &str) -> Option<DType> {
    match s {
        "single" => Some(DType::Single),
        "double" => Some(DType::Double),
        _ => None,
    }
}

/// Velocity of every trainable tensor, in `params_mut` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &Network<T>) -> Self {
        let velocity = net
            .named_params()
            .into_iter()
            .filter(|(_, kind, _)| kind.is_trainable())
            .map(|(name, _, t)| (name, vec![T::zero(); t.len()]))
            .collect();
        OptimizerState { velocity }
    }
}

/// `g' = g + wd * theta; v = momentum * v + g'; theta -= lr * v`.
pub fn sgd_momentum_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T, weight_decay: T) {
    assert!(params.len() == grads.len() && grads.len() == velocity.len(), "sgd shape mismatch");
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// One update of every trainable tensor. Tensors without a gradient are
/// treated as having gradient zero; halting biases are not decayed.
pub fn apply_update<T: Scalar>(net: &mut Network<T>, grads: &Gradients<T>, state: &mut OptimizerState<T>, lr: f64, cfg: &TrainConfig) {
    let mut slots = state.velocity.iter_mut();
    for p in net.params_mut() {
        if !p.kind.is_trainable() {
            continue;
        }
        let (name, v) = slots.next().expect("optimizer state matches network");
        debug_assert_eq!(name, &p.name);
        let g = grads.param(&p.name).map(|t| t.into_data()).unwrap_or_else(|| vec![T::zero(); p.data.len()]);
        let wd = if p.kind.decays() { cfg.weight_decay } else { 0.0 };
        sgd_momentum_step(p.data, &g, v, lit(lr), lit(cfg.momentum), lit(wd));
    }
}

pub enum InitMode<'a> {
    Fresh,
    /// Backbone from a checkpoint of the same structure; halting
    /// parameters are drawn fresh and any stored ones are ignored.
    TwoStage(&'a Checkpoint),
}

fn is_halting_name(name: &str) -> bool {
    name.split('.').nth(1).is_some_and(|s| s.starts_with("halt"))
}

/// Variance-scaling weights, unit batch norms and halting biases of -3,
/// then for two-stage initialization the checkpoint backbone on top.
pub fn initialize_network<T: Scalar>(spec: &NetworkSpec, mode: InitMode<'_>, seed: u64) -> Result<(Network<T>, Option<LoadReport>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::random(spec, &mut rng)?;
    match mode {
        InitMode::Fresh => Ok((net, None)),
        InitMode::TwoStage(ck) => {
            let backbone = Checkpoint {
                entries: ck.entries.iter().filter(|e| !is_halting_name(&e.name)).cloned().collect(),
            };
            let report = backbone.apply_to(&mut net, false)?;
            let mut problems: Vec<String> = report
                .missing
                .iter()
                .filter(|n| !is_halting_name(n))
                .map(|n| format!("{n}: missing from checkpoint"))
                .collect();
            problems.extend(report.skipped.iter().map(|n| format!("{n}: not in network")));
            if !problems.is_empty() {
                return Err(Error::CheckpointMismatch(problems));
            }
            let mut report = report;
            report.skipped = ck.entries.iter().filter(|e| is_halting_name(&e.name)).map(|e| e.name.clone()).collect();
            Ok((net, Some(report)))
        }
    }
}

/// Rounds mean unit counts half away from zero and clamps each to
/// `[1, max_units[k]]`.
pub fn derive_baseline_units(mean_units: &[f64], max_units: &[usize]) -> Vec<usize> {
    mean_units
        .iter()
        .zip(max_units)
        .map(|(&m, &l)| (m.round().max(1.0) as usize).min(l.max(1)))
        .collect()
}

fn bn_by_prefix<'a, T>(net: &'a mut Network<T>, prefix: &str) -> Option<&'a mut BatchNormParams<T>> {
    if prefix == "final_bn" {
        return Some(&mut net.final_bn);
    }
    let mut parts = prefix.split('.');
    let k: usize = parts.next()?.strip_prefix("block")?.parse().ok()?;
    let l: usize = parts.next()?.strip_prefix("unit")?.parse().ok()?;
    let unit = net.blocks.get_mut(k.checked_sub(1)?)?.units.get_mut(l.checked_sub(1)?)?;
    match parts.next()? {
        "bn1" => Some(&mut unit.bn1),
        "bn2" => Some(&mut unit.bn2),
        "bn3" => Some(&mut unit.bn3),
        _ => None,
    }
}

/// Values of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub loss: f64,
    pub task_loss: f64,
    pub block_ponders: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean regularized loss over the epoch's steps.
    pub loss: f64,
    pub task_loss: f64,
    /// Mean ponder cost per block.
    pub ponder: Vec<f64>,
    /// Mean units evaluated per block.
    pub units: Vec<f64>,
    /// Training accuracy on the epoch's batches.
    pub accuracy: f64,
    /// Mean adaptive FLOPs per image.
    pub flops: f64,
    /// Per block, fraction of examples giving the last unit positive weight.
    pub last_unit_used: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
}

pub fn log_header(blocks: usize) -> String {
    let mut s = String::from("# epoch\tloss");
    for k in 1..=blocks {
        let _ = write!(s, "\tponder{k}");
    }
    for k in 1..=blocks {
        let _ = write!(s, "\tunits{k}");
    }
    s.push_str("\tacc\tflops");
    s
}

pub fn log_line(m: &EpochMetrics) -> String {
    let mut s = format!("{}\t{}", m.epoch, m.loss);
    for v in m.ponder.iter().chain(&m.units) {
        let _ = write!(s, "\t{v}");
    }
    let _ = write!(s, "\t{}\t{}", m.accuracy, m.flops);
    s
}

/// Comment line reporting how often each block's last unit was reached.
pub fn dead_unit_line(m: &EpochMetrics) -> String {
    let mut s = format!("# last-unit-weight epoch {}", m.epoch);
    for (k, f) in m.last_unit_used.iter().enumerate() {
        let _ = write!(s, " block{}={f}", k + 1);
    }
    s
}

/// Trains in place. Batches are drawn from a seeded shuffle each epoch;
/// an incomplete final batch is dropped. One header line, then per epoch a
/// metrics line and a last-unit diagnostic are written to `log`. On a
/// non-finite loss the network is left at (and, given a path, saved as)
/// the last finite state.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn Write,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if data.channels != net.spec.input_channels || data.classes != net.spec.classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} channels and {} classes, network expects {} and {}",
            data.channels, data.classes, net.spec.input_channels, net.spec.classes
        )));
    }
    if data.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} records is smaller than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    net.spec.epsilon = cfg.epsilon;
    net.spec.tau = cfg.tau;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = OptimizerState::new(net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let blocks = net.blocks.len();
    let spec = net.spec.clone();
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        steps: Vec::new(),
    };
    writeln!(log, "{}", log_header(blocks))?;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut task_sum = 0.0;
        let mut ponder = vec![0.0; blocks];
        let mut units = vec![0.0; blocks];
        let mut last_used = vec![0.0; blocks];
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut flops = 0.0;
        let mut steps = 0usize;
        for (step, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
            let (images, labels) = data.batch::<T>(idx);
            let mut g = Graph::new();
            let fwd = forward_graph(&mut g, net, &images, &labels, BnMode::Train, cfg.tau)?;
            let loss = *g.value(fwd.loss).at([0, 0, 0, 0]);
            let task = *g.value(fwd.task_loss).at([0, 0, 0, 0]);
            let bp: Vec<T> = fwd.block_ponders.iter().map(|&p| *g.value(p).at([0, 0, 0, 0])).collect();
            let logged = ponder_regularized_loss(task, &bp, cfg.tau)?;
            if !logged.as_f64().is_finite() {
                if let Some(path) = checkpoint {
                    save_checkpoint(path, &Checkpoint::from_network(net))?;
                }
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            outcome.steps.push(StepRecord {
                loss: loss.as_f64(),
                task_loss: task.as_f64(),
                block_ponders: bp.iter().map(|v| v.as_f64()).collect(),
            });
            let grads = g.backward(fwd.loss)?;
            apply_update(net, &grads, &mut state, lr, cfg);
            for (prefix, stats) in &fwd.bn_stats {
                if let Some(bn) = bn_by_prefix(net, prefix) {
                    if let Some(r) = bn.running.as_mut() {
                        r.update(stats, lit(cfg.bn_decay));
                    }
                }
            }
            let logits = g.value(fwd.logits);
            for (b, &y) in labels.iter().enumerate() {
                let row: Vec<T> = (0..spec.classes).map(|c| *logits.at([b, 0, 0, c])).collect();
                correct += usize::from(argmax(&row) == y);
            }
            for (k, st) in fwd.blocks.iter().enumerate() {
                ponder[k] += st.ponder.iter().map(|v| v.as_f64()).sum::<f64>();
                units[k] += st.mean_units.iter().sum::<f64>();
                last_used[k] += st.last_unit_used.iter().filter(|&&u| u).count() as f64;
            }
            for rec in &fwd.records {
                flops += record_flops(&spec, data, rec)?;
            }
            seen += labels.len();
            loss_sum += logged.as_f64();
            task_sum += task.as_f64();
            steps += 1;
        }
        let n = seen as f64;
        let plain = plain_block_stats(&spec);
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / steps as f64,
            task_loss: task_sum / steps as f64,
            ponder: ponder.iter().zip(&plain).map(|(v, p)| p.map_or(v / n, |s| s.0)).collect(),
            units: units.iter().zip(&plain).map(|(v, p)| p.map_or(v / n, |s| s.1)).collect(),
            accuracy: correct as f64 / n,
            flops: flops / n,
            last_unit_used: last_used.iter().zip(&plain).map(|(v, p)| p.map_or(v / n, |_| 1.0)).collect(),
        };
        writeln!(log, "{}", log_line(&m))?;
        writeln!(log, "{}", dead_unit_line(&m))?;
        outcome.epochs.push(m);
    }
    if let Some(path) = checkpoint {
        save_checkpoint(path, &Checkpoint::from_network(net))?;
    }
    Ok(outcome)
}

/// `(ponder, units)` of blocks that always run every unit.
fn plain_block_stats(spec: &NetworkSpec) -> Vec<Option<(f64, f64)>> {
    spec.blocks
        .iter()
        .map(|b| match spec.halting {
            crate::arch::HaltingMode::None => Some((b.units as f64 + 1.0, b.units as f64)),
            _ => None,
        })
        .collect()
}

fn record_flops(spec: &NetworkSpec, data: &Dataset, rec: &EvalRecord) -> Result<f64> {
    Ok(count_flops_adaptive(spec, data.height, data.width, rec)?.total as f64)
}

/// Test-set statistics from per-image adaptive inference.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub ponder: Vec<f64>,
    pub units: Vec<f64>,
    pub flops: f64,
    pub last_unit_used: Vec<f64>,
    pub count: usize,
}

pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let blocks = net.blocks.len();
    let mut s = EvalSummary {
        accuracy: 0.0,
        ponder: vec![0.0; blocks],
        units: vec![0.0; blocks],
        flops: 0.0,
        last_unit_used: vec![0.0; blocks],
        count: data.len(),
    };
    for i in 0..data.len() {
        let (image, labels) = data.batch::<T>(&[i]);
        let out = net.infer_image(&image)?;
        s.accuracy += f64::from(u8::from(out.predicted_class() == labels[0]));
        for (k, b) in out.blocks.iter().enumerate() {
            s.ponder[k] += b.ponder.as_f64();
            s.units[k] += b.mean_units;
            s.last_unit_used[k] += f64::from(u8::from(b.last_unit_used));
        }
        s.flops += record_flops(&net.spec, data, &out.record)?;
    }
    let n = data.len() as f64;
    s.accuracy /= n;
    s.flops /= n;
    for v in s.ponder.iter_mut().chain(s.units.iter_mut()).chain(s.last_unit_used.iter_mut()) {
        *v /= n;
    }
    Ok(s)
}
