//! Minimal reverse-mode automatic differentiation over dense f64 tensors.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, check_gradients_sampled, GradCheckReport, WorstEntry};
pub use tape::{Tape, VarId};
pub use tensor::{numel, Tensor, TENSOR_MAGIC};
