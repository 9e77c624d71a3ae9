//! Binary checkpoint and dataset formats, the synthetic dataset generator,
//! and plain-text map exports.

mod bytes;
pub mod checkpoint;
pub mod dataset;
pub mod synthetic;
pub mod text;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry, LoadReport, StoredData};
pub use dataset::{load_dataset, load_masks, save_dataset, save_masks, Dataset, MaskSet};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use text::{read_fixations_csv, read_pgm, write_field_csv, write_pgm};
