//! Differentiable layer primitives and the spatial transformer.
//!
//! Volumes are `[C, D, H, W]` tensors. Every function here records one node
//! on the caller's [`Graph`](crate::tensor::Graph) and returns its id.

mod activation;
mod channels;
mod conv;
mod field;
mod norm;
mod regularizer;
mod resample;
mod warp;

pub use activation::{leaky_relu, softmax_channels};
pub use channels::{concat_channels, slice_channels};
pub use conv::{conv3d, ConvParams, KERNEL_VOLUME};
pub use field::DisplacementField;
pub use norm::{batch_norm, BatchStats, NormMode, NormParams};
pub use regularizer::{diffusion_penalty, diffusion_penalty_value};
pub use resample::{max_pool, upsample};
pub use warp::{warp, warp_tensor, Interp};

/// Row-major linear index into a `[D, H, W]` grid.
#[inline]
pub(crate) fn lin(d: usize, h: usize, w: usize, dims: [usize; 3]) -> usize {
    (d * dims[1] + h) * dims[2] + w
}
