//! Reverse-mode autodiff, layers, distributions, optimizer, checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod dist;
pub mod fd;
pub mod layers;
pub mod tape;

pub use adam::{Adam, AdamConfig, GradStats};
pub use dist::{mode_one_hot, sample_one_hot, DistParams};
pub use layers::{dense_forward, Dense, Gru, Mlp, ParamStore, PId, Staged, Tensor};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("loss must be scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch { context: String, expected: String, got: String },
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("unknown parameter {0} in checkpoint")]
    UnknownParam(String),
}
