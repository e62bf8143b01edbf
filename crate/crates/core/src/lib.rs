pub mod ablation;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod cost_volume;
pub mod error;
pub mod formats;
pub mod fusion;
pub mod hypothesis;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{MvsError, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
