//! A small reverse-mode differentiable tensor engine: exactly the operations
//! a convolutional heatmap-regression cascade needs, generic over `f32` and
//! `f64`.

pub mod conv;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use conv::ConvAlgorithm;
pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use optim::{sgd_step, Interpolation, LrSchedule, OptimizerState};
pub use params::{BufferId, InitSpec, ParamId, ParamStore, Parameter};
pub use tape::{BatchNormConfig, Gradients, Tape, Var};
pub use tensor::Tensor;
