//! Ponder cost maps as saliency predictions: fusion across blocks,
//! normalization, Gaussian blur, a center prior and AUC-Judd scoring.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::sact::PonderMap;
use crate::tensor::Scalar;

/// A row-major 2-d scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim("field", "values", height * width, values.len()));
        }
        Ok(Field { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Field {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `(min, max)`; `(inf, -inf)` for an empty field.
    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn from_ponder_map<T: Scalar>(map: &PonderMap<T>) -> Self {
        Field {
            height: map.height,
            width: map.width,
            values: map.values.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// Nearest-neighbour resampling: output pixel `(y, x)` reads source pixel
/// `(floor(y * h / H), floor(x * w / W))`.
pub fn resize_nearest(field: &Field, height: usize, width: usize) -> Field {
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = y * field.height / height;
        for x in 0..width {
            values.push(field.get(sy, x * field.width / width));
        }
    }
    Field { height, width, values }
}

/// Sum of the block maps after resampling each to the largest block
/// resolution.
pub fn total_ponder_map<T: Scalar>(maps: &[PonderMap<T>]) -> Result<Field> {
    let finest = maps
        .iter()
        .max_by_key(|m| m.height * m.width)
        .ok_or_else(|| Error::InvalidArgument("no ponder maps to combine".into()))?;
    let (h, w) = (finest.height, finest.width);
    let mut total = Field::constant(h, w, 0.0);
    for m in maps {
        let up = resize_nearest(&Field::from_ponder_map(m), h, w);
        total.values.iter_mut().zip(&up.values).for_each(|(t, v)| *t += v);
    }
    Ok(total)
}

/// Affine map of the range onto `[0, 1]`; a constant field becomes zeros.
pub fn normalize_map(field: &Field) -> Field {
    let (lo, hi) = field.range();
    let span = hi - lo;
    Field {
        height: field.height,
        width: field.width,
        values: field
            .values
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect(),
    }
}

fn gaussian_taps(s: f64) -> Vec<f64> {
    let radius = (3.0 * s).ceil() as i64;
    (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * s * s)).exp())
        .collect()
}

/// Blurs along one axis; taps falling outside the field are dropped and
/// the remaining weights rescaled to sum to one.
fn blur_axis(values: &[f64], len: usize, stride: usize, lines: usize, line_stride: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() / 2) as i64;
    let mut out = values.to_vec();
    for line in 0..lines {
        let base = line * line_stride;
        for i in 0..len as i64 {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (t, &k) in taps.iter().enumerate() {
                let j = i + t as i64 - radius;
                if (0..len as i64).contains(&j) {
                    acc += k * values[base + j as usize * stride];
                    norm += k;
                }
            }
            out[base + i as usize * stride] = acc / norm;
        }
    }
    out
}

/// Separable Gaussian blur with standard deviation `s`, truncated at
/// radius `ceil(3 s)` and renormalized at the borders.
pub fn gaussian_blur(field: &Field, s: f64) -> Result<Field> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidArgument(format!("blur s must be positive, got {s}")));
    }
    let taps = gaussian_taps(s);
    let (h, w) = (field.height, field.width);
    let rows = blur_axis(&field.values, w, 1, h, w, &taps);
    let values = blur_axis(&rows, h, w, w, 1, &taps);
    Ok(Field { height: h, width: w, values })
}

/// Isotropic Gaussian centred on the field with standard deviation
/// `sigma_frac * min(H, W)`, scaled so its largest sample is 1.
pub fn center_baseline(height: usize, width: usize, sigma_frac: f64) -> Field {
    let sigma = sigma_frac * height.min(width) as f64;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            values.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let peak = values.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    Field { height, width, values }
}

pub fn add_center_baseline(field: &Field, gamma: f64, sigma_frac: f64) -> Result<Field> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {gamma}")));
    }
    let b = center_baseline(field.height, field.width, sigma_frac);
    Ok(Field {
        height: field.height,
        width: field.width,
        values: field.values.iter().zip(&b.values).map(|(f, b)| f + gamma * b).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyParams {
    /// Blur standard deviation in output pixels.
    pub s: f64,
    pub gamma: f64,
    pub center_sigma_frac: f64,
}

impl Default for SaliencyParams {
    fn default() -> Self {
        SaliencyParams {
            s: 10.0,
            gamma: 0.005,
            center_sigma_frac: 0.25,
        }
    }
}

/// Resize to the image grid, normalize, blur and add the center prior.
pub fn postprocess(raw: &Field, height: usize, width: usize, params: &SaliencyParams) -> Result<Field> {
    let resized = resize_nearest(raw, height, width);
    let blurred = gaussian_blur(&normalize_map(&resized), params.s)?;
    add_center_baseline(&blurred, params.gamma, params.center_sigma_frac)
}

/// Probability that a fixated pixel outscores a non-fixated one, ties
/// counting one half. Repeated fixations on a pixel count once.
pub fn auc_judd(saliency: &Field, fixations: &[(usize, usize)]) -> Result<f64> {
    if fixations.is_empty() {
        return Err(Error::InvalidArgument("auc_judd needs at least one fixation".into()));
    }
    let mut fixated = BTreeSet::new();
    for &(r, c) in fixations {
        if r >= saliency.height || c >= saliency.width {
            return Err(Error::InvalidArgument(format!(
                "fixation ({r}, {c}) outside {}x{} map",
                saliency.height, saliency.width
            )));
        }
        fixated.insert(r * saliency.width + c);
    }
    let n = saliency.values.len();
    let positives = fixated.len();
    let negatives = n - positives;
    if negatives == 0 {
        return Err(Error::InvalidArgument("every pixel is fixated; no negatives".into()));
    }
    if saliency.values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("saliency map contains NaN".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| saliency.values[a].total_cmp(&saliency.values[b]));
    // midranks (1-based, doubled to stay integral) summed over positives
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && saliency.values[order[j + 1]] == saliency.values[order[i]] {
            j += 1;
        }
        let doubled_mid = (i + 1 + j + 1) as u128;
        let pos_here = order[i..=j].iter().filter(|k| fixated.contains(k)).count() as u128;
        rank_sum2 += doubled_mid * pos_here;
        i = j + 1;
    }
    let p = positives as u128;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Mean of `map` inside and outside a binary mask given at a finer
/// resolution. A map cell counts as inside when at least half of the mask
/// pixels it covers are set. Either mean is NaN when its region is empty.
pub fn masked_means(map: &Field, mask: &[bool], mask_height: usize, mask_width: usize) -> Result<(f64, f64)> {
    if mask.len() != mask_height * mask_width {
        return Err(Error::dim("object mask", "pixels", mask_height * mask_width, mask.len()));
    }
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..map.height {
        let (y0, y1) = (y * mask_height / map.height, ((y + 1) * mask_height).div_ceil(map.height));
        for x in 0..map.width {
            let (x0, x1) = (x * mask_width / map.width, ((x + 1) * mask_width).div_ceil(map.width));
            let mut set = 0;
            for my in y0..y1 {
                set += mask[my * mask_width + x0..my * mask_width + x1].iter().filter(|&&b| b).count();
            }
            let v = map.get(y, x);
            if 2 * set >= (y1 - y0) * (x1 - x0) {
                sin += v;
                nin += 1;
            } else {
                sout += v;
                nout += 1;
            }
        }
    }
    Ok((sin / nin as f64, sout / nout as f64))
}

/// Best `(s, gamma)` by mean AUC over a set of maps with fixations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridResult {
    pub s: f64,
    pub gamma: f64,
    pub auc: f64,
}

/// Exhaustive search; the first grid point wins ties.
pub fn grid_search(
    items: &[(Field, Vec<(usize, usize)>)],
    height: usize,
    width: usize,
    s_grid: &[f64],
    gamma_grid: &[f64],
    center_sigma_frac: f64,
) -> Result<GridResult> {
    if items.is_empty() || s_grid.is_empty() || gamma_grid.is_empty() {
        return Err(Error::InvalidArgument("grid search needs maps and a non-empty grid".into()));
    }
    let mut best: Option<GridResult> = None;
    for &s in s_grid {
        for &gamma in gamma_grid {
            let params = SaliencyParams {
                s,
                gamma,
                center_sigma_frac,
            };
            let mut total = 0.0;
            for (raw, fix) in items {
                total += auc_judd(&postprocess(raw, height, width, &params)?, fix)?;
            }
            let auc = total / items.len() as f64;
            if best.map_or(true, |b| auc > b.auc) {
                best = Some(GridResult { s, gamma, auc });
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Default search grid for blur and center weight.
pub const S_GRID: [f64; 6] = [1.0, 2.0, 4.0, 6.0, 8.0, 10.0];
pub const GAMMA_GRID: [f64; 5] = [0.0, 0.001, 0.005, 0.01, 0.05];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut impl Rng, h: usize, w: usize) -> Field {
        Field::new(h, w, (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pairwise_auc(f: &Field, fix: &[(usize, usize)]) -> f64 {
        let set: BTreeSet<usize> = fix.iter().map(|&(r, c)| r * f.width + c).collect();
        let (mut score, mut pairs) = (0.0, 0.0);
        for &p in &set {
            for q in 0..f.values.len() {
                if set.contains(&q) {
                    continue;
                }
                pairs += 1.0;
                score += match f.values[p].partial_cmp(&f.values[q]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        score / pairs
    }

    fn brute_blur(f: &Field, s: f64) -> Field {
        let r = (3.0 * s).ceil() as i64;
        let mut out = f.clone();
        for y in 0..f.height as i64 {
            for x in 0..f.width as i64 {
                let (mut acc, mut norm) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= f.height as i64 || xx >= f.width as i64 {
                            continue;
                        }
                        let k = (-((dy * dy) as f64) / (2.0 * s * s)).exp() * (-((dx * dx) as f64) / (2.0 * s * s)).exp();
                        acc += k * f.get(yy as usize, xx as usize);
                        norm += k;
                    }
                }
                out.values[y as usize * f.width + x as usize] = acc / norm;
            }
        }
        out
    }

    fn map(h: usize, w: usize, values: Vec<f64>) -> PonderMap<f64> {
        PonderMap {
            block: 0,
            height: h,
            width: w,
            values,
        }
    }

    #[test]
    fn total_map_single_and_constants() {
        let a = map(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(total_ponder_map(&[a.clone()]).unwrap().values, a.values);
        let fine = map(4, 4, vec![2.5; 16]);
        let coarse = map(2, 2, vec![1.25; 4]);
        let t = total_ponder_map(&[coarse, fine]).unwrap();
        assert_eq!((t.height, t.width), (4, 4));
        assert!(t.values.iter().all(|&v| v == 3.75));
        assert!(total_ponder_map::<f64>(&[]).is_err());
    }

    #[test]
    fn total_map_matches_upsample_then_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps: Vec<_> = [(8, 8), (4, 4), (2, 2), (1, 1)]
            .iter()
            .map(|&(h, w)| map(h, w, (0..h * w).map(|_| rng.gen_range(1.0..4.0)).collect()))
            .collect();
        let t = total_ponder_map(&maps).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = maps[0].get(y, x) + maps[1].get(y / 2, x / 2) + maps[2].get(y / 4, x / 4) + maps[3].get(0, 0);
                assert_eq!(t.get(y, x), want);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let f = Field::new(1, 3, vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(normalize_map(&f).values, vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_map(&Field::constant(2, 2, 7.0)).values, vec![0.0; 4]);
    }

    #[test]
    fn blur_constant_impulse_and_oracle() {
        let c = gaussian_blur(&Field::constant(5, 7, 3.0), 2.0).unwrap();
        assert!(c.values.iter().all(|&v| (v - 3.0).abs() < 1e-12));

        let mut imp = Field::constant(41, 41, 0.0);
        imp.values[20 * 41 + 20] = 1.0;
        let b = gaussian_blur(&imp, 2.0).unwrap();
        assert!((b.sum() - 1.0).abs() < 1e-12);
        let taps = gaussian_taps(2.0);
        let z: f64 = taps.iter().sum();
        for (dy, dx) in [(0usize, 0usize), (1, 2), (6, 6)] {
            let want = taps[6 + dy] * taps[6 + dx] / (z * z);
            assert!((b.get(20 + dy, 20 + dx) - want).abs() < 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(&mut rng, 9, 9);
        let fast = gaussian_blur(&f, 1.0).unwrap();
        let slow = brute_blur(&f, 1.0);
        for (a, b) in fast.values.iter().zip(&slow.values) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(gaussian_blur(&f, 0.0).is_err());
    }

    #[test]
    fn center_baseline_examples() {
        let f = Field::constant(9, 9, 0.0);
        let out = add_center_baseline(&f, 0.005, 0.25).unwrap();
        assert_eq!(out.get(4, 4), 0.005);
        assert!(out.values.iter().all(|&v| v <= 0.005 && v > 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_field(&mut rng, 6, 8);
        assert_eq!(add_center_baseline(&g, 0.0, 0.25).unwrap(), g);
        let even = center_baseline(6, 8, 0.25);
        assert_eq!(even.get(2, 3), 1.0);
        assert_eq!(even.get(3, 4), 1.0);
    }

    #[test]
    fn center_baseline_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random_field(&mut rng, 7, 5), random_field(&mut rng, 7, 5));
        let sum = Field::new(7, 5, a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect()).unwrap();
        let gamma = 0.3;
        let base = center_baseline(7, 5, 0.25);
        let lhs = add_center_baseline(&sum, gamma, 0.25).unwrap();
        let ra = add_center_baseline(&a, gamma, 0.25).unwrap();
        let rb = add_center_baseline(&b, gamma, 0.25).unwrap();
        for i in 0..35 {
            let l = lhs.values[i] + gamma * base.values[i];
            assert!((l - (ra.values[i] + rb.values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_examples() {
        let f = Field::new(2, 2, vec![0.1, 0.9, 0.3, 0.8]).unwrap();
        assert_eq!(auc_judd(&f, &[(0, 1), (1, 1)]).unwrap(), 1.0);
        assert_eq!(auc_judd(&f, &[(0, 0)]).unwrap(), 0.0);
        assert_eq!(auc_judd(&Field::constant(3, 3, 0.2), &[(1, 1), (0, 2)]).unwrap(), 0.5);
        assert!(auc_judd(&f, &[]).is_err());
        assert!(auc_judd(&f, &[(2, 0)]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_on_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_field(&mut rng, 4, 4);
        let fix = [(0, 1), (2, 3), (3, 0)];
        assert!((auc_judd(&f, &fix).unwrap() - pairwise_auc(&f, &fix)).abs() < 1e-12);
    }

    #[test]
    fn postprocessing_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let raw = random_field(&mut rng, 8, 8);
        let scaled = Field::new(8, 8, raw.values.iter().map(|v| v * 3.5).collect()).unwrap();
        let p = SaliencyParams::default();
        let fix = [(3, 4), (10, 20), (31, 31)];
        let a = auc_judd(&postprocess(&raw, 32, 32, &p).unwrap(), &fix).unwrap();
        let b = auc_judd(&postprocess(&scaled, 32, 32, &p).unwrap(), &fix).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_search_prefers_informative_blur() {
        let mut raw = Field::constant(8, 8, 1.0);
        raw.values[2 * 8 + 2] = 3.0;
        let items = vec![(raw, vec![(9, 9), (10, 10)])];
        let r = grid_search(&items, 32, 32, &[1.0, 4.0], &[0.0, 0.05], 0.25).unwrap();
        assert!(r.auc > 0.9, "{r:?}");
    }

    #[test]
    fn masked_means_downsample_by_majority() {
        let map = Field::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut mask = vec![false; 16];
        for i in [0, 1, 4, 5, 2, 6] {
            mask[i] = true;
        }
        let (inside, outside) = masked_means(&map, &mask, 4, 4).unwrap();
        assert_eq!(inside, 1.5);
        assert_eq!(outside, 3.5);
        assert!(masked_means(&map, &mask[..3], 4, 4).is_err());
    }

    proptest! {
        #[test]
        fn auc_is_rank_statistic(
            values in proptest::collection::vec(-3i32..3, 12),
            fix in proptest::collection::btree_set(0usize..12, 1..6),
        ) {
            let f = Field::new(3, 4, values.iter().map(|&v| v as f64).collect()).unwrap();
            let fix: Vec<_> = fix.iter().map(|&i| (i / 4, i % 4)).collect();
            let a = auc_judd(&f, &fix).unwrap();
            prop_assert!((a - pairwise_auc(&f, &fix)).abs() < 1e-12);
            let g = Field::new(3, 4, f.values.iter().map(|v| (v * 0.7).exp() + 2.0).collect()).unwrap();
            prop_assert_eq!(auc_judd(&g, &fix).unwrap(), a);
        }

        #[test]
        fn blur_preserves_mass_away_from_borders(seed in any::<u64>(), s in 0.5f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pad = 2 * (3.0 * s).ceil() as usize;
            let n = 5 + 2 * pad;
            let mut f = Field::constant(n, n, 0.0);
            for y in pad..pad + 5 {
                for x in pad..pad + 5 {
                    f.values[y * n + x] = rng.gen_range(0.0..1.0);
                }
            }
            let b = gaussian_blur(&f, s).unwrap();
            prop_assert!((b.sum() - f.sum()).abs() <= 1e-8 * f.sum().abs());
        }
    }
}
