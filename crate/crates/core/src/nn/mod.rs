//! Tensor type, layers with hand-written backward passes, masked MSE loss,
//! optimizers and the learning-rate schedule.

mod act;
mod conv;
pub mod init;
mod loss;
mod optim;
mod pool;
mod tensor;

pub use act::{concat_channels, relu_backward, relu_forward, split_channels};
pub use conv::{
    conv2d_backward, conv2d_backward_with, conv2d_forward, transposed_conv2x2_backward,
    transposed_conv2x2_forward, ConvBackward, LayerKind, LayerParams, ParamGrads,
};
pub use loss::mse_loss;
pub use optim::{adam_step, lr_at_epoch, sgd_step, AdamState, LrSchedule, OptimizerKind};
pub use pool::{maxpool2x2_backward, maxpool2x2_forward};
pub use tensor::Tensor;
