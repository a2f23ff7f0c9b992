//! Dense and convolutional numerics with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles and
//! replays them backwards from a scalar loss. Parameters live outside the
//! graph in a [`ParamStore`]; each forward pass copies them in as leaves.
//! All reductions iterate in ascending index order so results are
//! bitwise reproducible.

mod adam;
mod checkpoint;
mod graph;
mod init;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use init::{he_uniform, param_seed};
pub use tensor::{ParamStore, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("every sample is masked")]
    AllMasked,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
