//! Central finite-difference checks of taped gradients.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{BlockSpec, HaltingMode, NetworkSpec};
use crate::autodiff::Graph;
use crate::error::Result;
use crate::kernels::BnMode;
use crate::model::forward_graph;
use crate::network::{Network, ParamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            rtol: 1e-3,
            atol: 1e-7,
            coords_per_tensor: 50,
            seed: 0,
        }
    }
}

/// One evaluation of the function under test.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub loss: f64,
    /// Analytic gradients, requested only for the unperturbed point.
    pub grads: Option<BTreeMap<String, Tensor<f64>>>,
    /// Every discrete decision taken, including the branch of each ReLU
    /// and max-pool; finite differences are valid only while it stays
    /// fixed.
    pub signature: Vec<usize>,
    /// Distance of the nearest decision from its threshold.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a discrete decision.
    pub skipped: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    /// Set when the whole configuration was too close to a decision
    /// boundary to be checked.
    pub skipped: Option<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    /// `param <name> max_abs <v> max_rel <v> PASS|FAIL`, one line each.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(reason) = &self.skipped {
            let _ = writeln!(s, "skipped {reason}");
        }
        for e in &self.entries {
            let _ = writeln!(
                s,
                "param {} max_abs {:e} max_rel {:e} {}",
                e.name,
                e.max_abs,
                e.max_rel,
                if e.pass { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

/// Compares analytic gradients against central differences on sampled
/// coordinates of every tensor. `evaluate(params, want_grads)` returns the
/// loss at the given parameter values.
pub fn finite_diff_check<F>(params: &[(String, Tensor<f64>)], mut evaluate: F, opts: &FdOptions) -> Result<GradReport>
where
    F: FnMut(&[(String, Tensor<f64>)], bool) -> Result<Probe>,
{
    let base = evaluate(params, true)?;
    if base.margin <= 10.0 * opts.step {
        return Ok(GradReport {
            entries: Vec::new(),
            skipped: Some(format!(
                "a cumulative halting score lies {:e} from its threshold (needs > {:e})",
                base.margin,
                10.0 * opts.step
            )),
        });
    }
    let grads = base.grads.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (i, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let len = tensor.len();
        let coords: Vec<usize> = if len <= opts.coords_per_tensor {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut entry = GradEntry {
            name: name.clone(),
            max_abs: 0.0,
            max_rel: 0.0,
            checked: 0,
            skipped: 0,
            pass: true,
        };
        for j in coords {
            let orig = tensor.data()[j];
            work[i].1.data_mut()[j] = orig + opts.step;
            let plus = evaluate(&work, false)?;
            work[i].1.data_mut()[j] = orig - opts.step;
            let minus = evaluate(&work, false)?;
            work[i].1.data_mut()[j] = orig;
            if plus.signature != base.signature || minus.signature != base.signature {
                entry.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            entry.max_abs = entry.max_abs.max(abs);
            entry.max_rel = entry.max_rel.max(rel);
            entry.checked += 1;
            if !(abs <= opts.atol || rel <= opts.rtol) {
                entry.pass = false;
            }
        }
        entries.push(entry);
    }
    Ok(GradReport { entries, skipped: None })
}

/// Trainable tensors of a network, by name.
pub fn trainable_params(net: &Network<f64>) -> Vec<(String, Tensor<f64>)> {
    net.named_params()
        .into_iter()
        .filter(|(_, kind, _)| kind.is_trainable())
        .map(|(name, _, t)| (name, t))
        .collect()
}

/// Copies named tensors into a network.
pub fn set_params(net: &mut Network<f64>, params: &[(String, Tensor<f64>)]) {
    let lookup: BTreeMap<&str, &Tensor<f64>> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for p in net.params_mut() {
        if let Some(t) = lookup.get(p.name.as_str()) {
            p.data.copy_from_slice(t.data());
        }
    }
}

/// Checks the gradient of `CE + tau * sum_k rho_k` for a batch, with
/// train-mode batch norm.
pub fn network_gradcheck(
    net: &Network<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    tau: f64,
    opts: &FdOptions,
) -> Result<GradReport> {
    let params = trainable_params(net);
    let mut scratch = net.clone();
    finite_diff_check(
        &params,
        |p, want_grads| {
            set_params(&mut scratch, p);
            let mut g = Graph::new();
            let fwd = forward_graph(&mut g, &scratch, images, labels, BnMode::Train, tau)?;
            let loss = g.value(fwd.loss).data()[0];
            let grads = if want_grads {
                let gr = g.backward(fwd.loss)?;
                Some(
                    p.iter()
                        .filter_map(|(n, _)| gr.param(n).map(|t| (n.clone(), t)))
                        .collect(),
                )
            } else {
                None
            };
            Ok(Probe {
                loss,
                grads,
                signature: fwd.signature.iter().map(|&b| usize::from(b)).chain(g.branch_pattern()).collect(),
                margin: fwd.min_margin,
            })
        },
        opts,
    )
}

/// A two-block network small enough for exhaustive gradient checks, with
/// a batch of inputs and labels. Halting biases are drawn so that halting
/// happens within the blocks.
pub fn toy_problem(seed: u64, halting: HaltingMode) -> Result<(Network<f64>, Tensor<f64>, Vec<usize>)> {
    let spec = NetworkSpec {
        input_channels: 2,
        stem_width: 4,
        stem_kernel: 3,
        expansion: 2,
        blocks: vec![
            BlockSpec {
                units: 3,
                width: 2,
                stride: 1,
            },
            BlockSpec {
                units: 3,
                width: 3,
                stride: 2,
            },
        ],
        halting,
        epsilon: 0.01,
        tau: 0.01,
        tile: 1,
        classes: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::random(&spec, &mut rng)?;
    for p in net.params_mut() {
        match p.kind {
            ParamKind::HaltingBias => p.data.fill(rng.gen_range(-1.0..0.3)),
            ParamKind::BnOffset => p.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2)),
            _ => {}
        }
    }
    let images = Tensor::from_fn([3, 12, 12, 2], |_| rng.gen_range(-1.0..1.0));
    let labels = (0..3).map(|_| rng.gen_range(0..3)).collect();
    Ok((net, images, labels))
}
