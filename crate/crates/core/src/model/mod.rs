pub mod cascade;
pub mod config;
pub mod layers;
pub mod nets;
pub mod train;

pub use cascade::{image_batch, CascadeModel, Census, CheckpointMeta, CropPrediction, TrainStage};
pub use config::{BackboneConfig, CascadeConfig, DetectionNetConfig, HourglassConfig, Preset, ZRegressorConfig};
