//! Synthetic classification images: Gaussian noise with one square patch
//! of a class-specific oriented grating.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::dataset::{Dataset, MaskSet};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    /// Patch side as a fraction of the shorter image side.
    pub min_side_frac: f64,
    pub max_side_frac: f64,
    /// Standard deviation of the background noise.
    pub noise: f64,
    /// Grating period in pixels.
    pub period: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            count: 2000,
            height: 32,
            width: 32,
            channels: 3,
            seed: 0,
            min_side_frac: 0.25,
            max_side_frac: 0.40,
            noise: 0.3,
            period: 4.0,
        }
    }
}

impl SyntheticConfig {
    /// Smallest and largest allowed patch sides in pixels.
    pub fn side_bounds(&self) -> (usize, usize) {
        let short = self.height.min(self.width) as f64;
        ((self.min_side_frac * short).ceil() as usize, (self.max_side_frac * short).floor() as usize)
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.side_bounds();
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidArgument(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes < 2 || self.channels == 0 {
            return Err(Error::InvalidArgument("need at least 2 classes and 1 channel".into()));
        }
        if lo == 0 || lo > hi || !(self.noise >= 0.0) || !(self.period > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad patch bounds {lo}..={hi}, noise {} or period {}",
                self.noise, self.period
            )));
        }
        Ok(())
    }
}

/// Builds the dataset and its per-image object masks. Labels cycle through
/// the classes and are then shuffled, so every class appears
/// `count / classes` or one more times.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, MaskSet)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let mut labels: Vec<u32> = (0..cfg.count).map(|i| (i % cfg.classes) as u32).collect();
    labels.shuffle(&mut rng);
    let (lo, hi) = cfg.side_bounds();
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut ds = Dataset::new(h, w, c, cfg.classes);
    let mut masks = MaskSet {
        height: h,
        width: w,
        masks: Vec::with_capacity(cfg.count),
    };
    let mut pixels = vec![0f32; h * w * c];
    for &label in &labels {
        let side = rng.gen_range(lo..=hi);
        let top = rng.gen_range(0..=h - side);
        let left = rng.gen_range(0..=w - side);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let angle = PI * label as f64 / cfg.classes as f64;
        let (sin, cos) = angle.sin_cos();
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
                mask[y * w + x] = inside;
                let signal = if inside {
                    (2.0 * PI * (x as f64 * cos + y as f64 * sin) / cfg.period + phase).sin()
                } else {
                    0.0
                };
                for ch in 0..c {
                    pixels[(y * w + x) * c + ch] = (signal + noise.sample(&mut rng)) as f32;
                }
            }
        }
        ds.push(label, &pixels)?;
        masks.masks.push(mask);
    }
    Ok((ds, masks))
}
