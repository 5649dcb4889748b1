//! From-scratch building blocks for a hybrid windowed-attention /
//! dense-convolution grain-size classifier: an f64 autodiff tensor core,
//! window attention with guided cross-attention, DenseNet/residual/non-local
//! convolution blocks, a synthetic grain-image generator, the full
//! evaluation-metric suite, and training/diagnostic drivers.

pub mod attention;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod optim;
pub mod pgm;
pub mod init;
pub mod rng;
pub mod tensor;

pub use error::{GsError, Result};
pub use rng::Rng;
pub use tensor::{no_grad, Tensor};
