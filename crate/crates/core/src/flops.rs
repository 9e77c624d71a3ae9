//! Analytic FLOPs counts for convolutions, dense and as actually evaluated.
//!
//! A multiply-add counts as two operations, so a convolution producing
//! `positions` output pixels costs `2 * positions * kh * kw * cin * cout`.
//! The headline total covers the stem and residual convolutions (including
//! projection shortcuts). Halting-score layers and the classifier are
//! reported separately as `aux`.

use crate::arch::{HaltingMode, NetworkSpec};
use crate::error::{Error, Result};

/// What one residual unit cost on one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UnitRecord {
    pub evaluated: bool,
    /// Output positions where the 3x3 and last 1x1 layers ran.
    pub active_positions: u64,
    /// Positions where the first 1x1 layer ran (input resolution).
    pub conv1_positions: u64,
    /// Positions where a halting score was computed.
    pub halting_positions: u64,
}

/// Per-block, per-unit evaluation record of one image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalRecord {
    pub blocks: Vec<Vec<UnitRecord>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlopsBreakdown {
    pub layers: Vec<LayerFlops>,
    pub stem: u64,
    /// `units[k][l]`: residual and projection convolutions of a unit.
    pub units: Vec<Vec<u64>>,
    pub blocks: Vec<u64>,
    pub total: u64,
    /// Halting-score layers and the classifier.
    pub aux: u64,
}

impl FlopsBreakdown {
    /// Mean headline total over several images.
    pub fn mean_total(items: &[FlopsBreakdown]) -> f64 {
        if items.is_empty() {
            return 0.0;
        }
        items.iter().map(|b| b.total as f64).sum::<f64>() / items.len() as f64
    }
}

pub fn conv_flops(positions: u64, kernel: usize, cin: usize, cout: usize) -> u64 {
    2 * positions * (kernel * kernel * cin * cout) as u64
}

fn same_out(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

/// Spatial size entering each block: `(h, w)` after the stem and max pool.
fn block_geometry(spec: &NetworkSpec, height: usize, width: usize) -> Vec<((usize, usize), (usize, usize))> {
    let mut hw = (same_out(same_out(height, 2), 2), same_out(same_out(width, 2), 2));
    spec.blocks
        .iter()
        .map(|b| {
            let input = hw;
            hw = (same_out(hw.0, b.stride), same_out(hw.1, b.stride));
            (input, hw)
        })
        .collect()
}

impl EvalRecord {
    /// Every unit evaluated at every position.
    pub fn dense(spec: &NetworkSpec, height: usize, width: usize) -> Self {
        let geo = block_geometry(spec, height, width);
        let blocks = spec
            .blocks
            .iter()
            .zip(geo)
            .map(|(b, ((ih, iw), (oh, ow)))| {
                (0..b.units)
                    .map(|l| {
                        let out = (oh * ow) as u64;
                        UnitRecord {
                            evaluated: true,
                            active_positions: out,
                            conv1_positions: if l == 0 { (ih * iw) as u64 } else { out },
                            halting_positions: match spec.halting {
                                HaltingMode::None => 0,
                                HaltingMode::Act => u64::from(l + 1 < b.units),
                                HaltingMode::Sact => if l + 1 < b.units { out } else { 0 },
                            },
                        }
                    })
                    .collect()
            })
            .collect();
        EvalRecord { blocks }
    }
}

/// Dense FLOPs of a network on a square `resolution x resolution` input.
pub fn count_flops(spec: &NetworkSpec, resolution: usize) -> FlopsBreakdown {
    count_flops_adaptive(spec, resolution, resolution, &EvalRecord::dense(spec, resolution, resolution))
        .expect("dense record matches its spec")
}

/// FLOPs of one image as recorded during adaptive evaluation.
pub fn count_flops_adaptive(
    spec: &NetworkSpec,
    height: usize,
    width: usize,
    record: &EvalRecord,
) -> Result<FlopsBreakdown> {
    if record.blocks.len() != spec.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "record has {} blocks, spec has {}",
            record.blocks.len(),
            spec.blocks.len()
        )));
    }
    let mut out = FlopsBreakdown::default();
    let stem_pos = (same_out(height, 2) * same_out(width, 2)) as u64;
    out.stem = conv_flops(stem_pos, spec.stem_kernel, spec.input_channels, spec.stem_width);
    out.layers.push(LayerFlops {
        name: "stem".into(),
        flops: out.stem,
    });
    for (k, (b, units)) in spec.blocks.iter().zip(&record.blocks).enumerate() {
        if units.len() != b.units {
            return Err(Error::InvalidArgument(format!(
                "record block {} has {} units, spec has {}",
                k + 1,
                units.len(),
                b.units
            )));
        }
        let cout = spec.block_out_channels(k);
        let mut unit_totals = Vec::with_capacity(units.len());
        for (l, u) in units.iter().enumerate() {
            let cin = if l == 0 { spec.block_in_channels(k) } else { cout };
            let mut layers = vec![
                ("conv1", conv_flops(u.conv1_positions, 1, cin, b.width)),
                ("conv2", conv_flops(u.active_positions, 3, b.width, b.width)),
                ("conv3", conv_flops(u.active_positions, 1, b.width, cout)),
            ];
            if l == 0 && (b.stride != 1 || cin != cout) {
                layers.push(("projection", conv_flops(u.active_positions, 1, cin, cout)));
            }
            let mut unit_total = 0;
            for (name, f) in layers {
                unit_total += f;
                out.layers.push(LayerFlops {
                    name: format!("block{}.unit{}.{name}", k + 1, l + 1),
                    flops: f,
                });
            }
            out.aux += match spec.halting {
                HaltingMode::None => 0,
                HaltingMode::Act => 2 * cout as u64 * u.halting_positions,
                HaltingMode::Sact if u.halting_positions > 0 => {
                    conv_flops(u.halting_positions, 3, cout, 1) + 2 * cout as u64
                }
                HaltingMode::Sact => 0,
            };
            unit_totals.push(unit_total);
        }
        out.blocks.push(unit_totals.iter().sum());
        out.units.push(unit_totals);
    }
    out.aux += 2 * (spec.final_channels() * spec.classes) as u64;
    out.total = out.stem + out.blocks.iter().sum::<u64>();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(got: u64, want: f64, tol: f64) -> bool {
        ((got as f64 - want) / want).abs() <= tol
    }

    #[test]
    fn reference_network_totals() {
        assert!(close(count_flops(&NetworkSpec::resnet50(), 224).total, 8.18e9, 0.02));
        assert!(close(count_flops(&NetworkSpec::resnet101(), 224).total, 1.56e10, 0.02));
        assert!(close(count_flops(&NetworkSpec::resnet101(), 352).total, 3.85e10, 0.02));
    }

    #[test]
    fn shallower_baselines_match_reference_table() {
        for (units, want) in [([3, 3, 3, 3], 6.43e9), ([2, 4, 13, 3], 1.08e10), ([3, 4, 20, 3], 1.43e10)] {
            let spec = NetworkSpec::resnet101().with_units(&units);
            assert!(close(count_flops(&spec, 224).total, want, 0.02), "{units:?}");
        }
    }

    #[test]
    fn single_conv_formula() {
        assert_eq!(conv_flops(56 * 56, 3, 64, 64), 231_211_008);
    }

    #[test]
    fn total_is_sum_of_layers() {
        let b = count_flops(&NetworkSpec::resnet50(), 224);
        assert_eq!(b.total, b.layers.iter().map(|l| l.flops).sum::<u64>());
        assert_eq!(b.total, b.stem + b.blocks.iter().sum::<u64>());
    }

    #[test]
    fn dense_record_equals_dense_count() {
        let spec = NetworkSpec::desk();
        let rec = EvalRecord::dense(&spec, 32, 32);
        assert_eq!(count_flops_adaptive(&spec, 32, 32, &rec).unwrap(), count_flops(&spec, 32));
    }

    #[test]
    fn skipped_units_cost_nothing() {
        let spec = NetworkSpec::desk().with_units(&[3, 3, 3, 3]);
        let dense = count_flops(&spec, 32);
        let mut rec = EvalRecord::dense(&spec, 32, 32);
        rec.blocks[2][2] = UnitRecord::default();
        let b = count_flops_adaptive(&spec, 32, 32, &rec).unwrap();
        assert_eq!(b.units[2][2], 0);
        assert_eq!(dense.total - b.total, dense.units[2][2]);
    }

    #[test]
    fn half_active_interior_blob_halves_later_layers() {
        let spec = NetworkSpec::desk().with_units(&[2, 2, 2, 2]);
        let dense = count_flops(&spec, 64);
        let mut rec = EvalRecord::dense(&spec, 64, 64);
        // block 1 runs at 16x16; half of it is an interior 8x16 strip
        let u = &mut rec.blocks[0][1];
        u.active_positions = 128;
        u.conv1_positions = 160;
        let b = count_flops_adaptive(&spec, 64, 64, &rec).unwrap();
        let layer = |br: &FlopsBreakdown, name: &str| br.layers.iter().find(|l| l.name == name).unwrap().flops;
        assert_eq!(layer(&b, "block1.unit2.conv2") * 2, layer(&dense, "block1.unit2.conv2"));
        assert_eq!(layer(&b, "block1.unit2.conv3") * 2, layer(&dense, "block1.unit2.conv3"));
        assert_eq!(layer(&b, "block1.unit2.conv1"), 2 * 160 * 64 * 16);
    }

    #[test]
    fn mismatched_record_is_rejected() {
        let spec = NetworkSpec::desk();
        let mut rec = EvalRecord::dense(&spec, 32, 32);
        rec.blocks[1].pop();
        assert!(count_flops_adaptive(&spec, 32, 32, &rec).is_err());
        rec.blocks.pop();
        assert!(count_flops_adaptive(&spec, 32, 32, &rec).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_resolution_units_and_width(
            units in proptest::collection::vec(1usize..5, 4),
            res in 16usize..96,
            block in 0usize..4,
        ) {
            let spec = NetworkSpec::desk().with_units(&units);
            let base = count_flops(&spec, res).total;
            prop_assert!(count_flops(&spec, res + 8).total >= base);
            let mut more = units.clone();
            more[block] += 1;
            prop_assert!(count_flops(&NetworkSpec::desk().with_units(&more), res).total > base);
            let mut wide = spec.clone();
            wide.blocks[block].width += 4;
            prop_assert!(count_flops(&wide, res).total > base);
            let b = count_flops(&spec, res);
            prop_assert_eq!(b.total, b.stem + b.blocks.iter().sum::<u64>());
        }
    }
}
