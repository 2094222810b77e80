//! Neural-network core for coverage prediction: tensors, convolution layers
//! with hand-written backward passes, Adam, and the encoder/decoder
//! architectures built from them.

pub mod checkpoint;
mod error;
pub mod exec;
mod gemm;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod ops;
pub mod optim;
pub mod reference;
mod tensor;

pub use error::{NnError, Result};
pub use exec::{with_mode, ExecMode};
pub use model::{Model, ModelSpec};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
