//! Dense tensors, reverse-mode autodiff, and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod scalar;
pub mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, ValueId};
pub use scalar::{normal_cdf, normal_pdf, Scalar};
pub use tensor::{NumericsError, Param, Tensor};
