pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{ModelConfig, Prediction, PromptMode, SegModel};
pub use params::{Binding, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
