//! Encoder with a CLS bottleneck and the capacity- and span-restricted
//! autoregressive decoder.

mod config;
mod mask;
mod params;
mod transformer;

pub use config::{DecoderSpan, ModelConfig};
pub use mask::{attend_set, build_decoder_mask};
pub use params::{parameter_layout, BoundParams, ParamStore, DECODER_PREFIX};
pub use transformer::{decoder_forward, encoder_forward, mlm_logits, DecoderOutput, EncoderOutput, Mode};
