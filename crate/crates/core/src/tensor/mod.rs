//! Dense tensors, the differentiation tape, checkpoints and the gradient
//! checker.

mod checkpoint;
mod dense;
mod gradcheck;
mod scalar;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions, GradCheckReport};
pub use scalar::{Precision, Scalar};
pub use tape::{BatchStats, Tape, Var};
