//! Declarative network descriptions and their text config format.
//!
//! Config files are line oriented: `key=value` pairs, blank lines and lines
//! starting with `#` ignored. Recognised keys:
//!
//! ```text
//! input_channels=3        channels of the input image
//! stem.width=64           output channels of the 7x7 stride-2 stem conv
//! stem.kernel=7
//! expansion=4             unit output channels = expansion * block width
//! classes=1000
//! halting=sact            none | act | sact
//! epsilon=0.01
//! tau=0.005
//! tile=1                  SACT halting-score tile size
//! blocks=4
//! block1.units=3          residual units in block 1
//! block1.width=64         bottleneck width of block 1
//! block1.stride=1         stride of the first unit of block 1
//! ```
//!
//! Keys under `train.` (training settings) and `data.` (synthetic data
//! settings) are skipped here.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HaltingMode {
    None,
    Act,
    Sact,
}

impl HaltingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HaltingMode::None => "none",
            HaltingMode::Act => "act",
            HaltingMode::Sact => "sact",
        }
    }
}

impl FromStr for HaltingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HaltingMode::None),
            "act" => Ok(HaltingMode::Act),
            "sact" => Ok(HaltingMode::Sact),
            other => Err(Error::InvalidArgument(format!("unknown halting mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub units: usize,
    /// Bottleneck width; units output `expansion * width` channels.
    pub width: usize,
    /// Stride of the block's first unit.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub expansion: usize,
    pub blocks: Vec<BlockSpec>,
    pub halting: HaltingMode,
    pub epsilon: f64,
    pub tau: f64,
    pub tile: usize,
    pub classes: usize,
}

impl NetworkSpec {
    fn imagenet(units: [usize; 4]) -> Self {
        NetworkSpec {
            input_channels: 3,
            stem_width: 64,
            stem_kernel: 7,
            expansion: 4,
            blocks: units
                .iter()
                .enumerate()
                .map(|(k, &u)| BlockSpec {
                    units: u,
                    width: 64 << k,
                    stride: if k == 0 { 1 } else { 2 },
                })
                .collect(),
            halting: HaltingMode::None,
            epsilon: 0.01,
            tau: 0.0,
            tile: 1,
            classes: 1000,
        }
    }

    pub fn resnet50() -> Self {
        Self::imagenet([3, 4, 6, 3])
    }

    pub fn resnet101() -> Self {
        Self::imagenet([3, 4, 23, 3])
    }

    /// Small configuration that trains in minutes on 32x32 inputs.
    pub fn desk() -> Self {
        NetworkSpec {
            input_channels: 3,
            stem_width: 16,
            stem_kernel: 7,
            expansion: 4,
            blocks: [16, 32, 64, 128]
                .iter()
                .enumerate()
                .map(|(k, &w)| BlockSpec {
                    units: 2,
                    width: w,
                    stride: if k == 0 { 1 } else { 2 },
                })
                .collect(),
            halting: HaltingMode::Sact,
            epsilon: 0.01,
            tau: 0.005,
            tile: 1,
            classes: 4,
        }
    }

    pub fn with_units(mut self, units: &[usize]) -> Self {
        for (b, &u) in self.blocks.iter_mut().zip(units) {
            b.units = u;
        }
        self
    }

    pub fn with_halting(mut self, mode: HaltingMode) -> Self {
        self.halting = mode;
        self
    }

    pub fn block_out_channels(&self, k: usize) -> usize {
        self.expansion * self.blocks[k].width
    }

    /// Channels entering block `k`.
    pub fn block_in_channels(&self, k: usize) -> usize {
        if k == 0 {
            self.stem_width
        } else {
            self.block_out_channels(k - 1)
        }
    }

    pub fn final_channels(&self) -> usize {
        self.block_out_channels(self.blocks.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.blocks.is_empty() {
            return bad("a network needs at least one block");
        }
        if self.blocks.iter().any(|b| b.units == 0) {
            return bad("every block needs at least one unit");
        }
        if self.blocks.iter().any(|b| b.width == 0 || b.stride == 0) {
            return bad("block width and stride must be positive");
        }
        if self.input_channels == 0 || self.stem_width == 0 || self.stem_kernel == 0 || self.expansion == 0 {
            return bad("stem and expansion sizes must be positive");
        }
        if self.classes < 1 {
            return bad("classes must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.tau >= 0.0) {
            return bad("tau must be non-negative");
        }
        if self.tile == 0 {
            return bad("tile must be positive");
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_channels={}", self.input_channels);
        let _ = writeln!(s, "stem.width={}", self.stem_width);
        let _ = writeln!(s, "stem.kernel={}", self.stem_kernel);
        let _ = writeln!(s, "expansion={}", self.expansion);
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "halting={}", self.halting.as_str());
        let _ = writeln!(s, "epsilon={}", self.epsilon);
        let _ = writeln!(s, "tau={}", self.tau);
        let _ = writeln!(s, "tile={}", self.tile);
        let _ = writeln!(s, "blocks={}", self.blocks.len());
        for (k, b) in self.blocks.iter().enumerate() {
            let _ = writeln!(s, "block{}.units={}", k + 1, b.units);
            let _ = writeln!(s, "block{}.width={}", k + 1, b.width);
            let _ = writeln!(s, "block{}.stride={}", k + 1, b.stride);
        }
        s
    }

    /// Parses a config. Keys left out keep their values from `desk()`; a
    /// `blocks=` line resizes the block list, new blocks defaulting to one
    /// unit of width 16 and stride 2.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut spec = NetworkSpec::desk();
        let mut block_entries: Vec<(usize, usize, &str, &str)> = Vec::new();
        for (line_no, key, value) in config_pairs(text)? {
            if key.starts_with("train.") || key.starts_with("data.") {
                continue;
            }
            let err = |m: String| Error::Config { line: line_no, message: m };
            match key {
                "input_channels" => spec.input_channels = parse_num(value, line_no)?,
                "stem.width" => spec.stem_width = parse_num(value, line_no)?,
                "stem.kernel" => spec.stem_kernel = parse_num(value, line_no)?,
                "expansion" => spec.expansion = parse_num(value, line_no)?,
                "classes" => spec.classes = parse_num(value, line_no)?,
                "halting" => spec.halting = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "epsilon" => spec.epsilon = parse_num(value, line_no)?,
                "tau" => spec.tau = parse_num(value, line_no)?,
                "tile" => spec.tile = parse_num(value, line_no)?,
                "blocks" => {
                    let n: usize = parse_num(value, line_no)?;
                    spec.blocks.resize(
                        n,
                        BlockSpec {
                            units: 1,
                            width: 16,
                            stride: 2,
                        },
                    );
                }
                _ => {
                    let Some((block, field)) = key
                        .strip_prefix("block")
                        .and_then(|rest| rest.split_once('.'))
                    else {
                        return Err(err(format!("unknown key `{key}`")));
                    };
                    let index: usize = block
                        .parse()
                        .map_err(|_| err(format!("bad block index in `{key}`")))?;
                    if index == 0 {
                        return Err(err("block indices start at 1".into()));
                    }
                    block_entries.push((line_no, index - 1, field, value));
                }
            }
        }
        for (line_no, index, field, value) in block_entries {
            let block = spec.blocks.get_mut(index).ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("block{} exceeds the declared block count", index + 1),
            })?;
            match field {
                "units" => block.units = parse_num(value, line_no)?,
                "width" => block.width = parse_num(value, line_no)?,
                "stride" => block.stride = parse_num(value, line_no)?,
                other => {
                    return Err(Error::Config {
                        line: line_no,
                        message: format!("unknown block field `{other}`"),
                    })
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Splits config text into `(line number, key, value)` triples.
pub fn config_pairs(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

pub fn parse_num<N: FromStr>(value: &str, line: usize) -> Result<N> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("cannot parse `{value}`"),
    })
}
