//! `SACTDATA` labelled image files and their `SACTMASK` object masks.
//!
//! Dataset layout: magic, `u32` version, `u64` record count, `u32` height,
//! width, channels and class count, then per record a `u32` label and
//! `height * width * channels` little-endian `f32` pixels in HWC order.
//!
//! Mask layout: magic, `u32` version, `u64` count, `u32` height and width,
//! then one byte (0 or 1) per pixel.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::bytes::{to_usize, Reader};
use crate::tensor::{lit, Scalar, Tensor};

pub const DATASET_MAGIC: &[u8; 8] = b"SACTDATA";
pub const MASK_MAGIC: &[u8; 8] = b"SACTMASK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub labels: Vec<u32>,
    pub pixels: Vec<f32>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Dataset {
            height,
            width,
            channels,
            classes,
            labels: Vec::new(),
            pixels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn push(&mut self, label: u32, pixels: &[f32]) -> Result<()> {
        if pixels.len() != self.image_len() {
            return Err(Error::dim("dataset record", "pixels", self.image_len(), pixels.len()));
        }
        if label as usize >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.classes
            )));
        }
        self.labels.push(label);
        self.pixels.extend_from_slice(pixels);
        Ok(())
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Records `indices` stacked into a `(B, H, W, C)` tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| lit::<T>(v as f64)));
        }
        let t = Tensor::from_vec([indices.len(), self.height, self.width, self.channels], data)
            .expect("dataset dims");
        (t, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.pixels.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for d in [self.height, self.width, self.channels, self.classes] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            for &v in self.image(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = to_usize(r.u64("record count")?, "record count")?;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let channels = r.u32("channels")? as usize;
        let classes = r.u32("classes")? as usize;
        let mut ds = Dataset::new(height, width, channels, classes);
        let n = ds.image_len();
        let total = count.checked_mul(4 + 4 * n).unwrap_or(usize::MAX);
        if bytes.len().saturating_sub(36) < total {
            return Err(Error::Malformed(format!("truncated: {count} records of {n} pixels declared")));
        }
        ds.labels.reserve(count);
        ds.pixels.reserve(count * n);
        for i in 0..count {
            let label = r.u32("label")?;
            if label as usize >= classes {
                return Err(Error::Malformed(format!("record {i}: label {label} >= {classes} classes")));
            }
            ds.labels.push(label);
            let raw = r.take(4 * n, "pixels")?;
            ds.pixels.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))));
        }
        r.finish()?;
        Ok(ds)
    }
}

/// Binary object masks, one per dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.masks.len() * self.height * self.width);
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.masks.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for m in &self.masks {
            out.extend(m.iter().map(|&b| u8::from(b)));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MASK_MAGIC)?;
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = to_usize(r.u64("mask count")?, "mask count")?;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let mut masks = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let raw = r.take(height * width, "mask")?;
            masks.push(
                raw.iter()
                    .map(|&b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        _ => Err(Error::Malformed(format!("mask {i}: byte {b} is not 0 or 1"))),
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        r.finish()?;
        Ok(MaskSet { height, width, masks })
    }
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

pub fn save_masks(path: &Path, masks: &MaskSet) -> Result<()> {
    fs::write(path, masks.to_bytes())?;
    Ok(())
}

pub fn load_masks(path: &Path) -> Result<MaskSet> {
    MaskSet::from_bytes(&fs::read(path)?)
}
