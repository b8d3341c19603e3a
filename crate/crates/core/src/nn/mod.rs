//! Minimal CPU network engine: dense tensors, a reverse-mode tape, Adam and
//! checkpoints. Generic over `f32` (production) and `f64` (gradient checks).

pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var, STATS_EPS};
pub use params::{clip_grad_norm, conv_params, grad_norm, Adam, ParamSet};
pub use tensor::{Real, Tensor};
