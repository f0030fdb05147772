//! Autoencoder pretraining with a weak decoder, dense retrieval fine-tuning
//! and evaluation, and numerical instruments for the reconstruction-loss
//! decomposition.

pub mod analysis;
mod error;
pub mod eval;
pub mod model;
pub mod pretrain;
pub mod retrieval;
pub mod text;

pub use error::{Error, Result};
pub use seedenc_tensor::TensorError;
