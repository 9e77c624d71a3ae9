//! Adaptive Computation Time over one block of residual units.
//!
//! Units run in sequence. After unit `l < L` a halting score `h^l` in (0, 1)
//! is added to a running sum; the block stops at the first unit `N` where
//! the sum reaches `1 - epsilon` (the last unit always scores 1). The output
//! is `sum_{l<N} h^l x^l + R x^N` with remainder `R = 1 - sum_{l<N} h^l`,
//! and the ponder cost is `N + R`.

use crate::error::{Error, Result};
use crate::flops::UnitRecord;
use crate::kernels::{self, BnMode};
use crate::network::{HaltingUnitParams, ResidualUnitParams};
use crate::tensor::{lit, Scalar, Tensor};

/// Where a block's halting scores come from.
#[derive(Debug, Clone, Copy)]
pub enum ActHalting<'a, T> {
    Learned(&'a [HaltingUnitParams<T>]),
    /// Pinned scores for units `1..L-1`.
    Fixed(&'a [T]),
}

impl<T> ActHalting<'_, T> {
    fn len(&self) -> usize {
        match self {
            ActHalting::Learned(p) => p.len(),
            ActHalting::Fixed(s) => s.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActBlockResult<T> {
    pub output: Tensor<T>,
    /// Units evaluated, `N`.
    pub units: usize,
    pub remainder: T,
    /// Halting distribution over all `L` units; zero past `N`.
    pub distribution: Vec<T>,
    pub ponder: T,
    /// Residual-unit evaluations performed; always equal to `units`.
    pub evaluations: usize,
    pub records: Vec<UnitRecord>,
}

/// `W . v` accumulated in channel order.
pub(crate) fn dot<T: Scalar>(w: &[T], v: &[T]) -> T {
    let mut s = T::zero();
    for (&a, &b) in v.iter().zip(w) {
        s += a * b;
    }
    s
}

/// `sigmoid(W . pool(x) + b)` for every batch item.
pub fn act_halting_score<T: Scalar>(x: &Tensor<T>, params: &HaltingUnitParams<T>) -> Result<Vec<T>> {
    x.expect_dims(3, params.weight.len(), "act halting input", "channels")?;
    let pooled = kernels::global_avg_pool(x)?;
    Ok((0..x.batch())
        .map(|b| kernels::sigmoid_scalar(dot(&params.weight, pooled.pixel(b, 0, 0)) + params.bias))
        .collect())
}

pub(crate) fn check_block<T: Scalar>(units: &[ResidualUnitParams<T>], halting_len: usize, epsilon: f64) -> Result<()> {
    if units.is_empty() {
        return Err(Error::InvalidArgument("a block needs at least one residual unit".into()));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside (0, 1)")));
    }
    if halting_len != units.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "{} residual units need {} halting scores, got {halting_len}",
            units.len(),
            units.len() - 1
        )));
    }
    Ok(())
}

/// Runs one block on a single image, keeping only the current unit output
/// and the running weighted sum.
pub fn act_block_forward<T: Scalar>(
    input: &Tensor<T>,
    units: &[ResidualUnitParams<T>],
    halting: ActHalting<'_, T>,
    epsilon: f64,
) -> Result<ActBlockResult<T>> {
    check_block(units, halting.len(), epsilon)?;
    input.expect_dims(0, 1, "act block input", "batch")?;
    let threshold = T::one() - lit::<T>(epsilon);
    let big_l = units.len();

    let mut x = input.clone();
    let mut cumulative = T::zero();
    let mut remainder = T::one();
    let mut output: Option<Tensor<T>> = None;
    let mut ponder = T::zero();
    let mut distribution = vec![T::zero(); big_l];
    let mut records = vec![UnitRecord::default(); big_l];
    let mut evaluations = 0;

    for (l, unit) in units.iter().enumerate() {
        let in_positions = (x.height() * x.width()) as u64;
        x = unit.forward(&x, BnMode::Infer)?;
        evaluations += 1;
        let out_positions = (x.height() * x.width()) as u64;
        records[l] = UnitRecord {
            evaluated: true,
            active_positions: out_positions,
            conv1_positions: in_positions,
            halting_positions: 0,
        };
        let h = if l + 1 < big_l {
            records[l].halting_positions = 1;
            match halting {
                ActHalting::Learned(p) => act_halting_score(&x, &p[l])?[0],
                ActHalting::Fixed(s) => s[l],
            }
        } else {
            T::one()
        };
        let out = output.get_or_insert_with(|| Tensor::zeros(x.shape()));
        cumulative += h;
        ponder += T::one();
        let weight = if cumulative < threshold { h } else { remainder };
        for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += weight * v;
        }
        distribution[l] = weight;
        if cumulative < threshold {
            remainder -= h;
        } else {
            ponder += remainder;
            break;
        }
    }
    Ok(ActBlockResult {
        output: output.expect("at least one unit ran"),
        units: evaluations,
        remainder,
        distribution,
        ponder,
        evaluations,
        records,
    })
}

/// `L' = L + tau * sum_k rho_k`.
pub fn ponder_regularized_loss<T: Scalar>(task_loss: T, block_ponders: &[T], tau: f64) -> Result<T> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be non-negative, got {tau}")));
    }
    let total: T = block_ponders.iter().fold(T::zero(), |a, &b| a + b);
    Ok(task_loss + lit::<T>(tau) * total)
}
