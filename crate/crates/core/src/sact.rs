//! Spatially Adaptive Computation Time: ACT applied independently at every
//! spatial position of a block.
//!
//! Positions whose cumulative halting score reaches `1 - epsilon` become
//! inactive and keep their value; later units are evaluated only at active
//! positions. The block stops as soon as no position is active.

use crate::act::{check_block, dot};
use crate::error::{Error, Result};
use crate::flops::UnitRecord;
use crate::kernels::{self, conv2d_masked, BnMode};
use crate::network::{ResidualUnitParams, SactHaltingParams};
use crate::perforated::perforated_residual_apply_with_stats;
use crate::tensor::{lit, ActiveMask, ConvSpec, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub enum SactHalting<'a, T> {
    Learned(&'a [SactHaltingParams<T>]),
    /// Pinned scores for units `1..L-1`, identical at every position.
    Fixed(&'a [T]),
}

impl<T> SactHalting<'_, T> {
    fn len(&self) -> usize {
        match self {
            SactHalting::Learned(p) => p.len(),
            SactHalting::Fixed(s) => s.len(),
        }
    }
}

/// Per-position ponder cost of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct PonderMap<T> {
    pub block: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `rho_ij`.
    pub values: Vec<T>,
}

impl<T: Scalar> PonderMap<T> {
    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    /// Arithmetic mean, accumulated as offsets from the minimum so that a
    /// constant map returns its value exactly.
    pub fn mean(&self) -> T {
        crate::model::field_mean(&self.values)
    }
}

/// Per-position state after a block has run.
#[derive(Debug, Clone, PartialEq)]
pub struct SactBlockState<T> {
    pub active: ActiveMask,
    pub cumulative: Vec<T>,
    pub remainder: Vec<T>,
    pub ponder: Vec<T>,
    /// Units evaluated at each position, `N_ij`.
    pub units: Vec<usize>,
    pub output: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SactBlockResult<T> {
    pub output: Tensor<T>,
    /// Mean of the ponder map.
    pub ponder: T,
    pub ponder_map: PonderMap<T>,
    pub state: SactBlockState<T>,
    /// Residual-unit evaluations performed.
    pub evaluations: usize,
    pub records: Vec<UnitRecord>,
}

fn halting_spec(channels: usize) -> ConvSpec {
    ConvSpec::new(3, channels, 1, 1)
}

/// `sigmoid(conv3x3(x) + W . pool(x) + b)` at every position, `(B, H, W, 1)`.
pub fn sact_halting_scores<T: Scalar>(x: &Tensor<T>, params: &SactHaltingParams<T>) -> Result<Tensor<T>> {
    sact_halting_scores_at(x, params, None)
}

/// Halting scores at the positions in `mask` (zero elsewhere). The pooled
/// term always averages the whole field.
pub fn sact_halting_scores_at<T: Scalar>(
    x: &Tensor<T>,
    params: &SactHaltingParams<T>,
    mask: Option<&ActiveMask>,
) -> Result<Tensor<T>> {
    let c = x.channels();
    if params.weight.len() != c {
        return Err(Error::dim("sact halting weight", "channels", c, params.weight.len()));
    }
    let spatial = conv2d_masked(x, &params.spatial, &halting_spec(c), mask)?;
    let pooled = kernels::global_avg_pool(x)?;
    let [batch, h, w, _] = x.shape();
    let mut out = Tensor::zeros([batch, h, w, 1]);
    for b in 0..batch {
        let pd = dot(&params.weight, pooled.pixel(b, 0, 0));
        for y in 0..h {
            for xx in 0..w {
                if mask.is_some_and(|m| !m.get(y, xx)) {
                    continue;
                }
                let z = (*spatial.at([b, y, xx, 0]) + pd) + params.bias;
                *out.at_mut([b, y, xx, 0]) = kernels::sigmoid_scalar(z);
            }
        }
    }
    Ok(out)
}

/// Averages every channel over `k x k` tiles (partial tiles at ragged
/// edges average what they cover) and writes the tile mean back to each
/// covered position.
pub fn tile_halting_scores<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("tile size must be at least 1".into()));
    }
    if k == 1 {
        return Ok(scores.clone());
    }
    let [batch, h, w, c] = scores.shape();
    let mut out = Tensor::zeros(scores.shape());
    for b in 0..batch {
        for ty in (0..h).step_by(k) {
            for tx in (0..w).step_by(k) {
                let (y1, x1) = ((ty + k).min(h), (tx + k).min(w));
                let count = lit::<T>(((y1 - ty) * (x1 - tx)) as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for y in ty..y1 {
                        for x in tx..x1 {
                            s += *scores.at([b, y, x, ch]);
                        }
                    }
                    let mean = s / count;
                    for y in ty..y1 {
                        for x in tx..x1 {
                            *out.at_mut([b, y, x, ch]) = mean;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Runs one block on a single image. The first unit may change resolution
/// and is evaluated densely; later units must be stride-1 and run
/// perforated on the current active set.
pub fn sact_block_forward<T: Scalar>(
    input: &Tensor<T>,
    units: &[ResidualUnitParams<T>],
    halting: SactHalting<'_, T>,
    epsilon: f64,
    tile: usize,
) -> Result<SactBlockResult<T>> {
    check_block(units, halting.len(), epsilon)?;
    input.expect_dims(0, 1, "sact block input", "batch")?;
    if tile == 0 {
        return Err(Error::InvalidArgument("tile size must be at least 1".into()));
    }
    if let Some(u) = units.iter().skip(1).find(|u| u.stride() != 1) {
        return Err(Error::Unsupported(format!(
            "units after the first must be stride-1, found stride {}",
            u.stride()
        )));
    }
    let threshold = T::one() - lit::<T>(epsilon);
    let big_l = units.len();
    let mut records = vec![UnitRecord::default(); big_l];

    let in_positions = (input.height() * input.width()) as u64;
    let mut x = units[0].forward(input, BnMode::Infer)?;
    let [_, h, w, c] = x.shape();
    let n = h * w;
    records[0] = UnitRecord {
        evaluated: true,
        active_positions: n as u64,
        conv1_positions: in_positions,
        halting_positions: 0,
    };
    let mut evaluations = 1;

    let mut active = ActiveMask::new(h, w, true);
    let mut cumulative = vec![T::zero(); n];
    let mut remainder = vec![T::one(); n];
    let mut ponder = vec![T::zero(); n];
    let mut counts = vec![0usize; n];
    let mut output = Tensor::zeros([1, h, w, c]);

    for l in 0..big_l {
        if l > 0 {
            if !active.any() {
                break;
            }
            let (next, stats) = perforated_residual_apply_with_stats(&x, &units[l], &active)?;
            x = next;
            evaluations += 1;
            records[l] = UnitRecord {
                evaluated: true,
                active_positions: stats.active_positions as u64,
                conv1_positions: stats.conv1_positions as u64,
                halting_positions: 0,
            };
        }
        let scores = if l + 1 < big_l {
            records[l].halting_positions = active.count() as u64;
            let raw = match halting {
                SactHalting::Learned(p) => sact_halting_scores_at(&x, &p[l], Some(&active))?,
                SactHalting::Fixed(s) => Tensor::full([1, h, w, 1], s[l]),
            };
            Some(tile_halting_scores(&raw, tile)?)
        } else {
            None
        };
        let mut next_active = active.clone();
        for p in 0..n {
            if !active.flags()[p] {
                continue;
            }
            let hv = scores.as_ref().map_or(T::one(), |s| s.data()[p]);
            cumulative[p] += hv;
            ponder[p] += T::one();
            counts[p] += 1;
            let weight = if cumulative[p] < threshold { hv } else { remainder[p] };
            let px = &x.data()[p * c..(p + 1) * c];
            for (o, &v) in output.data_mut()[p * c..(p + 1) * c].iter_mut().zip(px) {
                *o += weight * v;
            }
            if cumulative[p] < threshold {
                remainder[p] -= hv;
            } else {
                ponder[p] += remainder[p];
                next_active.set(p / w, p % w, false);
            }
        }
        active = next_active;
    }

    let ponder_map = PonderMap {
        block: 0,
        height: h,
        width: w,
        values: ponder.clone(),
    };
    Ok(SactBlockResult {
        ponder: ponder_map.mean(),
        output: output.clone(),
        ponder_map,
        state: SactBlockState {
            active,
            cumulative,
            remainder,
            ponder,
            units: counts,
            output,
        },
        evaluations,
        records,
    })
}
