//! Dataset ingestion, patch extraction, composite stitching and the synthetic
//! domain-shift benchmark.

pub mod io;
pub mod synthetic;
pub mod transform;

pub use io::{load_dataset, open_dataset_dir, save_dataset};
pub use synthetic::{generate_synthetic, SyntheticBenchmark, SyntheticSpec};
pub use transform::{crop_sample, extract_patches, make_composites, resize_sample, Grid};
