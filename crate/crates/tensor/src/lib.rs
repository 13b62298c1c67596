//! Dense tensors with tape-based reverse-mode gradients.
//!
//! The engine is deliberately small: row-major storage, no broadcasting
//! beyond scalars and per-last-dim vectors, and exactly the operations a
//! Conformer mask estimator and its training loop need. Precision is a type
//! parameter, so the same model code runs in `f64` for finite-difference
//! checks and in `f32` for training and inference.

mod error;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use real::{gemm, Real};
pub use tape::{sigmoid, softmax_in_place, BatchStats, Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;
