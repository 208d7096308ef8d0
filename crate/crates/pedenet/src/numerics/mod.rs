//! Tensors, autodiff, and the linear algebra underneath them.

pub mod adam;
pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use graph::{Graph, TensorId};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
