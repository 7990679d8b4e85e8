pub mod config;
pub mod manifest;
pub mod synthetic;

pub use config::{Precision, RunConfig};
pub use manifest::{load_dataset, Dataset, DatasetRecord, PredictionFile};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticFaceSpec, SyntheticSet, Template};
