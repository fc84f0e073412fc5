//! Dense `f64` tensors with a reverse-mode differentiation tape.
//!
//! Everything the grounding model computes goes through [`Tape`]: values are
//! recorded in creation order, so a single reverse sweep over the node list is
//! a valid topological traversal. Parameters live outside the tape in a
//! [`ParamStore`] and are copied in as leaves; after [`Tape::backward`] their
//! gradients are folded back with [`ParamStore::accumulate`].

mod checkpoint;
pub mod gradcheck;
mod error;
mod loss;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointManifest};
pub use error::TensorError;
pub use loss::{bce, kl_divergence, LOG_CLAMP};
pub use optim::{clip_grad_norm, Adam, AdamConfig, LrSchedule};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
