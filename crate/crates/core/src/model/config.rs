use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// How many preceding token slots a decoder position may attend to.
/// The h_0 slot is always attendable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderSpan {
    Window(usize),
    All,
}

impl fmt::Display for DecoderSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderSpan::Window(k) => write!(f, "{k}"),
            DecoderSpan::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for DecoderSpan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(DecoderSpan::All);
        }
        s.parse::<usize>()
            .map(DecoderSpan::Window)
            .map_err(|_| Error::Config(format!("decoder span must be a positive integer or \"all\", got {s:?}")))
    }
}

impl Serialize for DecoderSpan {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DecoderSpan::Window(k) => s.serialize_u64(*k as u64),
            DecoderSpan::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for DecoderSpan {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct SpanVisitor;
        impl Visitor<'_> for SpanVisitor {
            type Value = DecoderSpan;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive integer or \"all\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<DecoderSpan, E> {
                Ok(DecoderSpan::Window(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<DecoderSpan, E> {
                usize::try_from(v)
                    .map(DecoderSpan::Window)
                    .map_err(|_| E::custom("decoder span must be positive"))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<DecoderSpan, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(SpanVisitor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_enc_layers: usize,
    pub num_dec_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub decoder_span: DecoderSpan,
    pub tie_decoder_embeddings: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    /// Desk-scale shape: decoder shallower than the encoder, span 2.
    fn default() -> Self {
        ModelConfig {
            num_enc_layers: 4,
            num_dec_layers: 2,
            hidden_dim: 128,
            num_heads: 4,
            ff_dim: 512,
            vocab_size: 8000,
            max_seq_len: 128,
            dropout: 0.1,
            decoder_span: DecoderSpan::Window(2),
            tie_decoder_embeddings: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.num_dec_layers == 0 {
            return fail("num_dec_layers must be at least 1".into());
        }
        if self.decoder_span == DecoderSpan::Window(0) {
            return fail("decoder_span must be at least 1 or \"all\"".into());
        }
        if self.vocab_size <= crate::text::NUM_RESERVED {
            return fail(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_round_trips_through_toml() {
        let cfg = ModelConfig {
            decoder_span: DecoderSpan::All,
            ..ModelConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("decoder_span = \"all\""));
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), cfg);
        let cfg = ModelConfig::default();
        assert_eq!(toml::from_str::<ModelConfig>(&toml::to_string(&cfg).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = ModelConfig {
            hidden_dim: 30,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            decoder_span: DecoderSpan::Window(0),
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
