use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seedenc_tensor::{Scalar, Tape, Var};

use super::{build_decoder_mask, BoundParams, ModelConfig};
use crate::text::CLS;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Forward-pass mode. Training enables inverted dropout driven by a seeded
/// RNG, so a given seed always reproduces the same forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    /// Derived mode for a second network in the same step.
    pub fn fork(self, salt: u64) -> Mode {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train { seed } => Mode::Train {
                seed: seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            },
        }
    }
}

struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn new(cfg: &ModelConfig, mode: Mode) -> Self {
        match mode {
            Mode::Train { seed } if cfg.dropout > 0.0 => Dropout {
                p: cfg.dropout,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            },
            _ => Dropout { p: 0.0, rng: None },
        }
    }

    fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) => Ok(tape.dropout(x, self.p, rng)?),
            None => Ok(x),
        }
    }
}

/// Encoder hidden states `[batch, seq_len, d]`; position 0 is h_0.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub batch: usize,
    pub seq_len: usize,
}

impl EncoderOutput {
    /// The CLS representation of every sequence, `[batch, d]`.
    pub fn h0<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let rows: Vec<usize> = (0..self.batch).map(|b| b * self.seq_len).collect();
        Ok(tape.gather_rows(self.hidden, &rows, &[self.batch])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[batch, n, V]`; slot `t - 1` predicts token `x_t`.
    pub logits: Var,
    /// Last-layer hidden states `[batch, n, d]`.
    pub hidden: Var,
    /// Layer input `[batch, n, d]`; slot 0 is h_0 itself.
    pub input: Var,
    pub batch: usize,
    pub len: usize,
}

fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    (batch, len): (usize, usize),
    mask: &[bool],
    cfg: &ModelConfig,
) -> Result<Var> {
    let (h, dh, d) = (cfg.num_heads, cfg.head_dim(), cfg.hidden_dim);
    let heads = |proj: &str, tape: &mut Tape<T>| -> Result<Var> {
        let w = p.get(&format!("{prefix}.attn.{proj}.w"))?;
        let b = p.get(&format!("{prefix}.attn.{proj}.b"))?;
        let y = tape.linear(x, w, Some(b))?;
        let y = tape.reshape(y, &[batch, len, h, dh])?;
        Ok(tape.swap_axes12(y)?)
    };
    let q = heads("q", tape)?;
    let k = heads("k", tape)?;
    let v = heads("v", tape)?;
    let scores = tape.batched_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let probs = tape.softmax_masked(scores, mask)?;
    let ctx = tape.batched_matmul(probs, v, false)?;
    let ctx = tape.swap_axes12(ctx)?;
    let ctx = tape.reshape(ctx, &[batch, len, d])?;
    let w = p.get(&format!("{prefix}.attn.o.w"))?;
    let b = p.get(&format!("{prefix}.attn.o.b"))?;
    Ok(tape.linear(ctx, w, Some(b))?)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gamma"))?;
    let b = p.get(&format!("{prefix}.beta"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

/// Post-norm block: `LN(x + Attn(x))`, then `LN(h + FF(h))`.
#[allow(clippy::too_many_arguments)]
fn transformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    dims: (usize, usize),
    mask: &[bool],
    cfg: &ModelConfig,
    drop: &mut Dropout,
) -> Result<Var> {
    let a = attention(tape, p, prefix, x, dims, mask, cfg)?;
    let a = drop.apply(tape, a)?;
    let h = tape.add(x, a)?;
    let h = layer_norm(tape, p, &format!("{prefix}.ln1"), h)?;
    let f = tape.linear(h, p.get(&format!("{prefix}.ff1.w"))?, Some(p.get(&format!("{prefix}.ff1.b"))?))?;
    let f = tape.gelu(f)?;
    let f = tape.linear(f, p.get(&format!("{prefix}.ff2.w"))?, Some(p.get(&format!("{prefix}.ff2.b"))?))?;
    let f = drop.apply(tape, f)?;
    let out = tape.add(h, f)?;
    layer_norm(tape, p, &format!("{prefix}.ln2"), out)
}

/// `x @ E^T` for the `[V, d]` embedding table `E`, with `x: [.., d]`.
fn tied_projection<T: Scalar>(tape: &mut Tape<T>, x: Var, table: Var, cfg: &ModelConfig) -> Result<Var> {
    let lead: Vec<usize> = {
        let s = tape.shape(x);
        s[..s.len() - 1].to_vec()
    };
    let rows: usize = lead.iter().product();
    let x3 = tape.reshape(x, &[1, rows, cfg.hidden_dim])?;
    let e3 = tape.reshape(table, &[1, cfg.vocab_size, cfg.hidden_dim])?;
    let y = tape.batched_matmul(x3, e3, true)?;
    let mut shape = lead;
    shape.push(cfg.vocab_size);
    Ok(tape.reshape(y, &shape)?)
}

/// Bidirectional post-norm Transformer over `[CLS, x_1, .., x_n]` rows.
/// PAD positions (`attention_valid == false`) are masked out as keys.
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    input_ids: &[u32],
    attention_valid: &[bool],
    batch: usize,
    mode: Mode,
) -> Result<EncoderOutput> {
    if batch == 0 || input_ids.len() % batch != 0 || input_ids.len() != attention_valid.len() {
        return Err(Error::Contract(format!(
            "{} ids / {} validity flags do not form {batch} rows",
            input_ids.len(),
            attention_valid.len()
        )));
    }
    let len = input_ids.len() / batch;
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_seq_len,
        });
    }
    if len == 0 || (0..batch).any(|b| input_ids[b * len] != CLS || !attention_valid[b * len]) {
        return Err(Error::Contract("every encoder row must start with a valid CLS token".into()));
    }
    let mut drop = Dropout::new(cfg, mode);
    let positions: Vec<u32> = (0..len as u32).collect();
    let tok = tape.embedding(p.get("emb.tok")?, input_ids, &[batch, len])?;
    let pos = tape.embedding(p.get("emb.pos")?, &positions, &[len])?;
    let x = tape.add(tok, pos)?;
    let x = layer_norm(tape, p, "emb.ln", x)?;
    let mut x = drop.apply(tape, x)?;

    let h = cfg.num_heads;
    let mut mask = Vec::with_capacity(batch * h * len * len);
    for b in 0..batch {
        let valid = &attention_valid[b * len..(b + 1) * len];
        for _ in 0..h * len {
            mask.extend_from_slice(valid);
        }
    }
    for i in 0..cfg.num_enc_layers {
        x = transformer_layer(tape, p, &format!("enc.{i}"), x, (batch, len), &mask, cfg, &mut drop)?;
    }
    Ok(EncoderOutput {
        hidden: x,
        batch,
        seq_len: len,
    })
}

/// Masked-LM head (dense, GELU, layer norm, tied output matrix) applied at
/// flat positions of the encoder output. Position 0 of any row (CLS) is
/// rejected.
pub fn mlm_logits<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    enc: &EncoderOutput,
    positions: &[usize],
) -> Result<Var> {
    let total = enc.batch * enc.seq_len;
    if let Some(&bad) = positions.iter().find(|&&i| i >= total || i % enc.seq_len == 0) {
        return Err(Error::Contract(format!("MLM position {bad} is a CLS slot or out of range")));
    }
    let x = tape.gather_rows(enc.hidden, positions, &[positions.len()])?;
    let x = tape.linear(x, p.get("mlm.dense.w")?, Some(p.get("mlm.dense.b")?))?;
    let x = tape.gelu(x)?;
    let x = layer_norm(tape, p, "mlm.ln", x)?;
    let logits = tied_projection(tape, x, p.get("emb.tok")?, cfg)?;
    Ok(tape.add(logits, p.get("mlm.bias")?)?)
}

/// Autoregressive decoder whose only view of the encoder is `h0`.
///
/// Slot 0 receives `h0` directly; slots `1..n` receive the embeddings of
/// `x_1 .. x_{n-1}` plus position embeddings. Attention follows
/// [`build_decoder_mask`] with `cfg.decoder_span`.
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    h0: Var,
    target_ids: &[u32],
    batch: usize,
    mode: Mode,
) -> Result<DecoderOutput> {
    let d = cfg.hidden_dim;
    if tape.shape(h0) != [batch, d] {
        return Err(Error::Tensor(seedenc_tensor::TensorError::Shape {
            op: "decoder h0",
            lhs: tape.shape(h0).to_vec(),
            rhs: vec![batch, d],
        }));
    }
    if batch == 0 || target_ids.is_empty() || target_ids.len() % batch != 0 {
        return Err(Error::Contract(format!(
            "{} target ids do not form {batch} non-empty rows",
            target_ids.len()
        )));
    }
    let n = target_ids.len() / batch;
    if n > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    let mut drop = Dropout::new(cfg, mode);
    let (tok_table, pos_table) = if cfg.tie_decoder_embeddings {
        (p.get("emb.tok")?, p.get("emb.pos")?)
    } else {
        (p.get("dec.tok")?, p.get("dec.pos")?)
    };
    let prev: Vec<u32> = (0..batch)
        .flat_map(|b| target_ids[b * n..b * n + n - 1].iter().copied())
        .collect();
    let positions: Vec<u32> = (1..n as u32).collect();
    let tok = tape.embedding(tok_table, &prev, &[batch, n - 1])?;
    let pos = tape.embedding(pos_table, &positions, &[n - 1])?;
    let tok = tape.add(tok, pos)?;
    let tok = layer_norm(tape, p, "dec.emb_ln", tok)?;
    let tok = drop.apply(tape, tok)?;
    let stacked = tape.concat_rows(h0, tok)?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| std::iter::once(b).chain((1..n).map(move |s| batch + b * (n - 1) + s - 1)))
        .collect();
    let input = tape.gather_rows(stacked, &order, &[batch, n])?;

    let mask = build_decoder_mask(n - 1, cfg.decoder_span);
    let mut x = input;
    for i in 0..cfg.num_dec_layers {
        x = transformer_layer(tape, p, &format!("dec.{i}"), x, (batch, n), &mask, cfg, &mut drop)?;
    }
    let logits = if cfg.tie_decoder_embeddings {
        tied_projection(tape, x, tok_table, cfg)?
    } else {
        tape.linear(x, p.get("dec.out.w")?, None)?
    };
    let logits = tape.add(logits, p.get("dec.out_bias")?)?;
    Ok(DecoderOutput {
        logits,
        hidden: x,
        input,
        batch,
        len: n,
    })
}
