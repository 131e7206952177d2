//! Batch, group and gated GNPlus normalization with hand-written backward
//! passes, a small convolutional network to train them, and instrumentation
//! for loss-landscape and gradient-predictiveness analysis.

// `!(x > 0.0)` is how NaN gets rejected alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod norm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor4};
