//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! The engine is first-order only: a [`Tape`] records one forward pass and is
//! consumed by a single backward sweep.

mod fd;
mod kernels;
mod tape;
mod tensor;

pub use fd::{finite_difference_check, FdReport};
pub use kernels::splitmix64;
pub use tape::{BatchStats, DropoutKey, Gradients, NormMode, Tape, Var};
pub use tensor::Tensor;

/// Scalar type of every tensor. 64-bit unless built with `single-precision`.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

/// Width in bytes of [`Real`], recorded in checkpoints.
pub const REAL_BYTES: u8 = std::mem::size_of::<Real>() as u8;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttribute { op: &'static str, detail: String },
    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    TapeConsumed,
    #[error("function is not deterministic: two identical evaluations gave {first} and {second}")]
    NonDeterministic { first: Real, second: Real },
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
