//! Forward and backward passes for every layer kind in the networks:
//! convolution, max-pooling, cross-channel LRN, ReLU, fully connected, and
//! softmax cross-entropy.
//!
//! Activations are single images laid out `[C, H, W]`; batching happens one
//! level up, in the network.

mod activation;
mod conv;
pub(crate) mod fc;
mod gemm;
mod loss;
mod lrn;
mod pool;

pub use activation::{relu, relu_backward};
pub use conv::{conv2d, conv2d_backward, conv_output_extent, Conv2d, ConvCache, ConvGrads, ConvParams};
pub use fc::{fully_connected, fully_connected_backward, FcGrads, FcParams};
pub use loss::{softmax, softmax_xent};
pub use lrn::{lrn, lrn_backward, LrnParams};
pub use pool::{maxpool, maxpool_backward, pool_output_extent, MaxPool, PoolCache};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Extracts `[C, H, W]` from a rank-3 tensor.
pub(crate) fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!(
            "{what} expects a [C, H, W] tensor, got {:?}",
            t.shape()
        ))),
    }
}
