//! On-disk formats: HVOL volumes, dataset manifests, reports and
//! checkpoints. Every writer goes through a temporary file and a rename.

mod checkpoint;
mod dataset;
mod hvol;
mod json;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use dataset::{
    load_dataset, load_manifest, load_sample, manifest_dir, Manifest, SampleEntry, ScanPaths, SCHEMA_VERSION,
};
pub use hvol::{
    decode, encode, read_field, read_hvol, read_mask, read_volume, write_field, write_mask, write_volume, Dtype, Hvol,
    HvolData, HvolHeader, HEADER_LEN, MAGIC,
};
pub use json::{read_json, write_atomic, write_json};
