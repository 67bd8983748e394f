//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Design notes:
//! - Row-major contiguous storage, no strided views.
//! - Values are stored as `f64`; a tensor with [`DType::F32`] rounds every
//!   stored value (and every gradient contribution) to `f32` precision after
//!   each operation, so f32 checkpoints round-trip bit-exactly while
//!   accumulation inside a single op runs in f64.
//! - Any op that produces a NaN/Inf aborts with an error naming the op.
//! - Gradients flow through an implicit tape: each result tensor records the
//!   op that produced it; [`backward`] replays adjoints in reverse
//!   topological order and clears the records it consumed.

mod autodiff;
mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use autodiff::{backward, no_grad};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use ops::{
    add, add_channel_bias, add_row_bias, concat, conv2d, dropout, index, layer_norm, linear,
    logsumexp, matmul, mean, mul, relu, reshape, scale, softmax, spatial_mean, sub, sum,
    transpose,
};
pub use rng::{shuffle, RngStream};
pub use tensor::{DType, Tensor};

/// Whether stochastic layers (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
