//! CPU tensors with reverse-mode autodiff, the 2D segmentation and
//! patch-classification networks, losses, optimizers and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod loss;
pub mod nets;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, TrainingInfo};
pub use graph::{Graph, Var};
pub use nets::{Arch, Model, PnetClConfig, SegNetConfig, UnetClConfig};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
