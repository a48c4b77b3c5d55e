//! Single-image super-resolution with an attention U-Net generator, a conditional
//! PatchGAN discriminator, a four-term hybrid loss, full-reference quality metrics and
//! signed-rank method comparison.

pub mod autograd;
pub mod data;
pub mod error;
pub mod imagecore;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use imagecore::ImageTensor;
pub use tensor::Tensor;
