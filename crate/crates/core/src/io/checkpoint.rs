//! `SACTCKPT` files: named little-endian tensors.
//!
//! Layout: magic, `u32` version, `u32` entry count, then per entry a
//! `u32` name length and UTF-8 name, `u32` rank, `u64` dims, a dtype tag
//! byte and the raw values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::bytes::{to_usize, Reader};
use crate::network::Network;
use crate::tensor::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SACTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredData {
    Single(Vec<f32>),
    Double(Vec<f64>),
}

impl StoredData {
    pub fn dtype(&self) -> DType {
        match self {
            StoredData::Single(_) => DType::Single,
            StoredData::Double(_) => DType::Double,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StoredData::Single(v) => v.len(),
            StoredData::Double(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_slice<T: Scalar>(data: &[T]) -> Self {
        match T::DTYPE {
            DType::Single => StoredData::Single(data.iter().map(|v| v.as_f64() as f32).collect()),
            DType::Double => StoredData::Double(data.iter().map(|v| v.as_f64()).collect()),
        }
    }

    fn copy_into<T: Scalar>(&self, out: &mut [T]) {
        match self {
            StoredData::Single(v) => out.iter_mut().zip(v).for_each(|(o, &x)| *o = T::from_f64_lossy(x as f64)),
            StoredData::Double(v) => out.iter_mut().zip(v).for_each(|(o, &x)| *o = T::from_f64_lossy(x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: StoredData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

/// What happened to each tensor during a load.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// In the file but not in the network.
    pub skipped: Vec<String>,
    /// In the network but not in the file; left at their current values.
    pub missing: Vec<String>,
}

impl Checkpoint {
    /// Every stored tensor of a network, in its precision. Tensors are
    /// saved with their 4-d shapes.
    pub fn from_network<T: Scalar>(net: &Network<T>) -> Self {
        let entries = net
            .named_params()
            .into_iter()
            .map(|(name, _, t)| CheckpointEntry {
                name,
                dims: t.shape().iter().map(|&d| d as u64).collect(),
                data: StoredData::from_slice(t.data()),
            })
            .collect();
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copies matching tensors into `net`, converting precision when
    /// needed. Shape mismatches always fail. With `strict`, tensors present
    /// on only one side fail too; otherwise they are listed in the report.
    pub fn apply_to<T: Scalar>(&self, net: &mut Network<T>, strict: bool) -> Result<LoadReport> {
        let by_name: BTreeMap<&str, &CheckpointEntry> = self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut report = LoadReport::default();
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        let mut params = net.params_mut();
        for p in &params {
            seen.insert(p.name.clone());
            match by_name.get(p.name.as_str()) {
                None => report.missing.push(p.name.clone()),
                Some(e) => {
                    let want: Vec<u64> = p.shape.iter().map(|&d| d as u64).collect();
                    if e.dims != want {
                        problems.push(format!("{}: shape {:?} in file, {:?} expected", p.name, e.dims, want));
                    }
                }
            }
        }
        report.skipped = self
            .entries
            .iter()
            .filter(|e| !seen.contains(&e.name))
            .map(|e| e.name.clone())
            .collect();
        if strict {
            problems.extend(report.missing.iter().map(|n| format!("{n}: missing from file")));
            problems.extend(report.skipped.iter().map(|n| format!("{n}: not in network")));
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems));
        }
        for p in params.iter_mut() {
            if let Some(e) = by_name.get(p.name.as_str()) {
                e.data.copy_into(p.data);
                report.loaded.push(p.name.clone());
            }
        }
        Ok(report)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names = BTreeSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.entries.len(), "entry count")?.to_le_bytes());
        for e in &self.entries {
            if !names.insert(e.name.as_str()) {
                return Err(Error::DuplicateName(e.name.clone()));
            }
            let count: u64 = e.dims.iter().product();
            if count != e.data.len() as u64 {
                return Err(Error::InvalidArgument(format!(
                    "tensor `{}` has dims {:?} but {} values",
                    e.name,
                    e.dims,
                    e.data.len()
                )));
            }
            out.extend_from_slice(&u32_len(e.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&u32_len(e.dims.len(), "rank")?.to_le_bytes());
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(e.data.dtype().tag());
            match &e.data {
                StoredData::Single(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                StoredData::Double(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = r.u32("entry count")? as usize;
        let mut names = BTreeSet::new();
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<_>>>()?;
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown dtype tag {tag}")))?;
            let n = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("dims of `{name}` overflow")))?;
            let n = to_usize(n, "element count")?;
            let size = dtype.size();
            let raw = r.take(n.checked_mul(size).unwrap_or(usize::MAX), "tensor values")?;
            let data = match dtype {
                DType::Single => StoredData::Single(raw.chunks_exact(size).map(f32::read_le).collect()),
                DType::Double => StoredData::Double(raw.chunks_exact(size).map(f64::read_le).collect()),
            };
            entries.push(CheckpointEntry { name, dims, data });
        }
        r.finish()?;
        Ok(Checkpoint { entries })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
