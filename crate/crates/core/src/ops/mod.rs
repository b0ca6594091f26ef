//! Differentiable tensor operations.
//!
//! Each submodule pairs a forward kernel with a hand-derived backward kernel
//! and exposes a recording function that validates shapes, runs the forward
//! pass, and pushes the op onto the tape. Backward kernels are invoked from
//! `Tape::backward` only.

pub mod attention;
pub mod deform_ops;
pub mod elementwise;
pub mod linalg;
pub mod loss_ops;
pub mod norm;
pub mod resample;

pub use attention::{cross_attention, local_attention};
pub use deform_ops::deform_conv2d;
pub use elementwise::{add, concat_channels, gated_fuse, relu, scale, scale_channels, slice_channel, tanh};
pub use linalg::{conv2d, conv_output_size, linear, matmul};
pub use loss_ops::{boundary_dou_loss_op, dice_loss_op, dot_const, sum_all, weighted_sum};
pub use norm::{batch_norm_eval, batch_norm_train, entropy_channel, layer_norm, softmax_channel};
pub use resample::{bilinear_sample, downsample_avg, offsets_to_points, upsample_bilinear};
