//! Forward and backward kernels, independent of the tape.

mod basic;
mod conv;
mod norm;
mod pool;

pub use basic::{
    concat_channels, global_avg_pool, linear, relu, slice_channels, softmax, softmax_cross_entropy,
};
pub use conv::{conv2d, conv2d_backward_input, transposed_conv2d};
pub use norm::{BatchMoments, BnMode, BnState};
pub use pool::maxpool2d;

pub(crate) use basic::{
    global_avg_pool_backward, linear_backward, log_softmax_at, relu_backward,
    scatter_channels,
};
pub(crate) use conv::{conv2d_backward, transposed_conv2d_backward};
pub(crate) use norm::{batch_norm_backward, batch_norm_forward};
pub(crate) use pool::maxpool2d_backward;
