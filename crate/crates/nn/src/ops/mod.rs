//! Differentiable layer primitives with hand-written backward passes.

mod activation;
mod concat;
mod conv;
mod loss;
mod pool;

pub use activation::{relu, sigmoid_forward, Activation};
pub use concat::{concat_channels, concat_channels_backward};
pub use conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, ConvGeometry, ConvGrads,
};
pub use loss::{mae, mae_loss, rmse, rmse_metric};
pub use pool::{maxpool2d_backward, maxpool2d_forward, upsample2x_backward, upsample2x_forward};
