//! Minimal reverse-mode differentiation: exactly the layers the tracker and
//! discriminators need, plus gradient reversal, Adam and checkpoints.
//!
//! Everything is `f64`. The heavy kernels (`conv`, `dense`, `gru`) run through
//! [`crate::par::Exec`] and are exposed so they can be benchmarked directly.

mod adam;
mod checkpoint;
pub mod conv;
pub mod dense;
pub mod gradcheck;
mod graph;
pub mod gru;
pub mod norm;
mod params;
pub mod pool;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use graph::{BatchStats, Gradients, Graph, NormMode, ParamKey, Var, PROB_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
