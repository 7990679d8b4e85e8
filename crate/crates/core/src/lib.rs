//! Heatmap codec, crop geometry, evaluation metrics, the three-stage cascade
//! and its data pipeline.

pub mod data;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod landmarks;
pub mod metrics;

pub use error::{CoreError, ErrorClass, Result};
pub use landmarks::{LandmarkSet2D, LandmarkSet3D};
pub mod model;
