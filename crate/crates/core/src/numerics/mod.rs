//! Dense tensors and the hand-differentiated primitives the pipeline is built from.

mod gradcheck;
mod ops;
mod tensor;

pub use gradcheck::{gradcheck, DEFAULT_STEP};
pub use ops::{
    conv2d, conv2d_backward, conv2d_with_grad, fully_connected, fully_connected_backward,
    fully_connected_with_grad, global_avg_pool, global_avg_pool_backward, global_avg_pool_with_grad,
    relu, relu_backward, relu_with_grad, ConvGeometry, GradPair,
};
pub use tensor::Tensor;
