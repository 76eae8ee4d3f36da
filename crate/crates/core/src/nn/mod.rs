//! Differentiable layer kernels with hand-written backward passes.
//!
//! Everything is rank-generic: tensors carry a `(batch, channels, spatial...)`
//! shape and the kernels iterate spatial dims through index counters, with the
//! innermost axis kept contiguous so the hot loops vectorize.

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod receptive;
pub mod tensor;

pub use conv::ConvLayer;
pub use norm::BatchNorm;
pub use receptive::ReceptiveField;
pub use tensor::{Param, Scalar, Tensor};

/// Whether a pass uses batch statistics and dropout (training) or running
/// statistics and identity dropout (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
