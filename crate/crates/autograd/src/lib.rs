//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Tape`] records operations as they run; [`Tape::backward`] replays them
//! in reverse. Convolutions lower to im2col plus a single-precision GEMM, and
//! every kernel is single-threaded with a fixed reduction order, so results
//! are bitwise reproducible on one platform.

mod kernels;
mod tape;
mod tensor;

pub mod gradcheck;

pub use tape::{softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
