//! Dense tensors, reverse-mode differentiation, SGD with momentum, the cosine
//! learning-rate schedule and the checkpoint container.

pub mod checkpoint;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::{CosineSchedule, OptimizerState};
pub use scalar::Scalar;
pub use tape::{BatchStats, Gradients, SeqLayout, Tape, Var, BATCH_NORM_EPS, L2_NORM_EPS, STATS_POOL_EPS};
pub use tensor::Tensor;

