//! Residual units evaluated only at active spatial positions.
//!
//! The first 1x1 layer runs on the active set dilated by the 3x3 layer's
//! receptive field, the 3x3 and last 1x1 layers on the active set. Skipped
//! positions hold zeros in the intermediate tensors and receive a zero
//! residual, so they copy the input through.

use crate::error::{Error, Result};
use crate::kernels::{self, conv2d_masked};
use crate::network::{BatchNormParams, ResidualUnitParams};
use crate::tensor::{ActiveMask, Scalar, Tensor};

/// Position counts of one perforated evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PerforationStats {
    pub active_positions: usize,
    pub conv1_positions: usize,
}

/// Positions dilated by a 3x3 window, clipped at the borders.
pub fn dilate_mask(mask: &ActiveMask) -> ActiveMask {
    mask.dilate3x3()
}

fn bn_relu_at<T: Scalar>(x: &Tensor<T>, bn: &BatchNormParams<T>, mask: &ActiveMask) -> Result<Tensor<T>> {
    let r = bn
        .running
        .as_ref()
        .ok_or_else(|| Error::UninitializedRunningStats("perforated evaluation needs running statistics".into()))?;
    let y = kernels::batch_norm_apply_masked(x, &bn.scale, &bn.offset, &r.mean, &r.var, Some(mask))?;
    Ok(kernels::relu(&y))
}

/// `x + f(x)` at active positions and `x` elsewhere, for a stride-1 unit
/// with inference-mode batch norm. The result is bitwise equal to dense
/// evaluation followed by the copy rule.
pub fn perforated_residual_apply<T: Scalar>(
    x_hat: &Tensor<T>,
    unit: &ResidualUnitParams<T>,
    mask: &ActiveMask,
) -> Result<Tensor<T>> {
    perforated_residual_apply_with_stats(x_hat, unit, mask).map(|(y, _)| y)
}

pub fn perforated_residual_apply_with_stats<T: Scalar>(
    x_hat: &Tensor<T>,
    unit: &ResidualUnitParams<T>,
    mask: &ActiveMask,
) -> Result<(Tensor<T>, PerforationStats)> {
    if unit.stride() != 1 {
        return Err(Error::Unsupported(format!(
            "perforated evaluation needs a stride-1 unit, got stride {}",
            unit.stride()
        )));
    }
    x_hat.expect_dims(3, unit.in_channels(), "perforated unit input", "channels")?;
    if mask.height() != x_hat.height() {
        return Err(Error::dim("perforated mask", "height", x_hat.height(), mask.height()));
    }
    if mask.width() != x_hat.width() {
        return Err(Error::dim("perforated mask", "width", x_hat.width(), mask.width()));
    }
    // channel-changing units replace the input even at inactive positions,
    // so the copy rule needs an identity shortcut
    if unit.projection.is_some() {
        return Err(Error::Unsupported(
            "perforated evaluation needs an identity shortcut".into(),
        ));
    }
    let dilated = dilate_mask(mask);
    let stats = PerforationStats {
        active_positions: mask.count() * x_hat.batch(),
        conv1_positions: dilated.count() * x_hat.batch(),
    };
    if !mask.any() {
        return Ok((x_hat.clone(), stats));
    }

    let pre = bn_relu_at(x_hat, &unit.bn1, &dilated)?;
    let r = conv2d_masked(&pre, &unit.conv1.kernel, &unit.conv1.spec, Some(&dilated))?;
    let r = bn_relu_at(&r, &unit.bn2, &dilated)?;
    let r = conv2d_masked(&r, &unit.conv2.kernel, &unit.conv2.spec, Some(mask))?;
    let r = bn_relu_at(&r, &unit.bn3, mask)?;
    let r = conv2d_masked(&r, &unit.conv3.kernel, &unit.conv3.spec, Some(mask))?;
    let mut out = x_hat.clone();
    let hw = mask.height() * mask.width();
    let c = out.channels();
    for (p, (o, rv)) in out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(r.data().chunks_exact(c))
        .enumerate()
    {
        if mask.flags()[p % hw] {
            for (a, &b) in o.iter_mut().zip(rv) {
                *a += b;
            }
        }
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::BnMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_unit(c: usize, width: usize, rng: &mut ChaCha8Rng) -> ResidualUnitParams<f64> {
        let mut u = ResidualUnitParams::zeros(c, width, c, 1);
        for layer in [&mut u.conv1, &mut u.conv2, &mut u.conv3] {
            layer.kernel = Tensor::from_fn(layer.kernel.shape(), |_| rng.gen_range(-1.0..1.0));
        }
        for bn in [&mut u.bn1, &mut u.bn2, &mut u.bn3] {
            for v in bn.scale.iter_mut().chain(bn.offset.iter_mut()) {
                *v = rng.gen_range(-1.0..1.0);
            }
            let r = bn.running.as_mut().unwrap();
            r.mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            r.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
        u
    }

    fn merge_oracle(x: &Tensor<f64>, unit: &ResidualUnitParams<f64>, mask: &ActiveMask) -> Tensor<f64> {
        let dense = unit.forward(x, BnMode::Infer).unwrap();
        Tensor::from_fn(x.shape(), |[b, y, xx, c]| {
            if mask.get(y, xx) {
                *dense.at([b, y, xx, c])
            } else {
                *x.at([b, y, xx, c])
            }
        })
    }

    #[test]
    fn all_active_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_unit(4, 3, &mut rng);
        let x = Tensor::from_fn([1, 5, 5, 4], |_| rng.gen_range(-1.0..1.0));
        let got = perforated_residual_apply(&x, &u, &ActiveMask::new(5, 5, true)).unwrap();
        assert_eq!(got, u.forward(&x, BnMode::Infer).unwrap());
    }

    #[test]
    fn all_inactive_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_unit(4, 3, &mut rng);
        let x = Tensor::from_fn([1, 5, 5, 4], |_| rng.gen_range(-1.0..1.0));
        let (got, stats) = perforated_residual_apply_with_stats(&x, &u, &ActiveMask::new(5, 5, false)).unwrap();
        assert_eq!(got, x);
        assert_eq!(stats, PerforationStats::default());
    }

    #[test]
    fn checkerboard_matches_merge_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_unit(4, 2, &mut rng);
        let x = Tensor::from_fn([1, 6, 6, 4], |_| rng.gen_range(-1.0..1.0));
        let mask = ActiveMask::from_fn(6, 6, |y, x| (y + x) % 2 == 0);
        let got = perforated_residual_apply(&x, &u, &mask).unwrap();
        assert_eq!(got, merge_oracle(&x, &u, &mask));
    }

    #[test]
    fn stride_two_is_unsupported() {
        let u = ResidualUnitParams::<f64>::zeros(4, 2, 8, 2);
        let x = Tensor::zeros([1, 4, 4, 4]);
        assert!(matches!(
            perforated_residual_apply(&x, &u, &ActiveMask::new(4, 4, true)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn dilation_examples() {
        let m = ActiveMask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        let d = dilate_mask(&m);
        assert_eq!(d, ActiveMask::from_fn(5, 5, |y, x| (1..=3).contains(&y) && (1..=3).contains(&x)));
        assert_eq!(dilate_mask(&ActiveMask::new(5, 5, false)), ActiveMask::new(5, 5, false));
        let c = dilate_mask(&ActiveMask::from_fn(4, 4, |y, x| y == 0 && x == 0));
        assert_eq!(c, ActiveMask::from_fn(4, 4, |y, x| y < 2 && x < 2));
    }

    /// Leaving out any dilated-only position from the first layer changes
    /// an active output.
    #[test]
    fn dilation_set_is_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut u = random_unit(3, 3, &mut rng);
        // keep every ReLU open so no contribution vanishes by accident
        for bn in [&mut u.bn1, &mut u.bn2, &mut u.bn3] {
            bn.scale.fill(0.1);
            bn.offset.fill(1.0);
        }
        let x = Tensor::from_fn([1, 5, 5, 3], |_| rng.gen_range(0.5..1.5));
        let mask = ActiveMask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        let dilated = dilate_mask(&mask);
        let full = perforated_residual_apply(&x, &u, &mask).unwrap();
        for y in 0..5 {
            for xx in 0..5 {
                if !dilated.get(y, xx) || mask.get(y, xx) {
                    continue;
                }
                let mut shrunk = dilated.clone();
                shrunk.set(y, xx, false);
                let pre = bn_relu_at(&x, &u.bn1, &shrunk).unwrap();
                let r = conv2d_masked(&pre, &u.conv1.kernel, &u.conv1.spec, Some(&shrunk)).unwrap();
                let r = bn_relu_at(&r, &u.bn2, &shrunk).unwrap();
                let r = conv2d_masked(&r, &u.conv2.kernel, &u.conv2.spec, Some(&mask)).unwrap();
                let r = bn_relu_at(&r, &u.bn3, &mask).unwrap();
                let r = conv2d_masked(&r, &u.conv3.kernel, &u.conv3.spec, Some(&mask)).unwrap();
                let changed = (0..3).any(|c| *x.at([0, 2, 2, c]) + *r.at([0, 2, 2, c]) != *full.at([0, 2, 2, c]));
                assert!(changed, "position ({y},{xx}) was not needed");
            }
        }
    }
}
