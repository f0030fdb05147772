use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use seedenc_tensor::{Scalar, Tape, Var};

use crate::model::{encoder_forward, BoundParams, Mode, ModelConfig, ParamStore};
use crate::text::{pad_sequences, TokenSequence};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Dot,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Dot => "dot",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Metric::Dot),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::Config(format!("unknown metric {s:?} (expected dot or cosine)"))),
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn similarity(q: &[f32], d: &[f32], metric: Metric) -> Result<f64> {
    if q.len() != d.len() {
        return Err(Error::Tensor(seedenc_tensor::TensorError::Shape {
            op: "similarity",
            lhs: vec![q.len()],
            rhs: vec![d.len()],
        }));
    }
    match metric {
        Metric::Dot => Ok(dot(q, d)),
        Metric::Cosine => {
            let (nq, nd) = (norm(q), norm(d));
            if nq == 0.0 || nd == 0.0 {
                return Err(Error::DegenerateVector);
            }
            Ok((dot(q, d) / (nq * nd)).clamp(-1.0, 1.0))
        }
    }
}

/// h_0 rows `[B, d]` for `seqs`, padded to a common length, on `tape`.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    seqs: &[TokenSequence],
    mode: Mode,
) -> Result<Var> {
    let (ids, valid, _) = pad_sequences(seqs);
    let enc = encoder_forward(tape, cfg, p, &ids, &valid, seqs.len(), mode)?;
    enc.h0(tape)
}

/// CLS embedding of one sequence in eval mode.
pub fn encode_cls(cfg: &ModelConfig, params: &ParamStore, seq: &TokenSequence) -> Result<Vec<f32>> {
    Ok(encode_all(cfg, params, std::slice::from_ref(seq))?.remove(0))
}

const ENCODE_BATCH: usize = 64;

/// CLS embeddings of every sequence in eval mode, in input order.
///
/// Sequences are batched only with others of identical length, so no row
/// ever sees padding and each embedding depends on its own tokens alone.
pub fn encode_all(cfg: &ModelConfig, params: &ParamStore, seqs: &[TokenSequence]) -> Result<Vec<Vec<f32>>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        by_len.entry(s.len()).or_default().push(i);
    }
    let mut out = vec![Vec::new(); seqs.len()];
    for group in by_len.values() {
        for chunk in group.chunks(ENCODE_BATCH) {
            let mut tape = Tape::new();
            let p = params.bind_frozen(&mut tape)?;
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let h0 = encode_on_tape(&mut tape, cfg, &p, &batch, Mode::Eval)?;
            let d = cfg.hidden_dim;
            let data = tape.value(h0).data();
            for (r, &i) in chunk.iter().enumerate() {
                out[i] = data[r * d..(r + 1) * d].to_vec();
            }
        }
    }
    Ok(out)
}
