use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use seedenc_tensor::{Tape, Tensor, Var};

use super::markov::{exact_conditional_entropy, generate_markov_corpus, mean_and_se, MarkovCorpus, MarkovSpec};
use crate::model::{decoder_forward, DecoderSpan, Mode, ModelConfig, ParamStore};
use crate::pretrain::{adam_step, step_seed, AdamState, OptimConfig};
use crate::text::{IGNORE_INDEX, NUM_RESERVED};
use crate::{Error, Result};

/// Minimum number of evaluated positions for a decomposition report.
pub const MIN_POSITIONS: usize = 1000;

const TOPIC_TABLE: &str = "topic.emb";

/// Decoder trained directly on a Markov source, with a learned h_0 per topic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryDecoderConfig {
    pub name: String,
    pub layers: usize,
    pub span: DecoderSpan,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for TheoryDecoderConfig {
    fn default() -> Self {
        TheoryDecoderConfig {
            name: "decoder".into(),
            layers: 2,
            span: DecoderSpan::All,
            hidden_dim: 32,
            num_heads: 4,
            ff_dim: 64,
            steps: 1_500,
            batch_size: 16,
            seed: 0,
            optim: OptimConfig {
                lr_peak: 3e-3,
                weight_decay: 0.0,
                warmup_steps: 100,
                total_steps: 1_500,
                ..OptimConfig::default()
            },
        }
    }
}

impl TheoryDecoderConfig {
    pub fn model_config(&self, spec: &MarkovSpec) -> ModelConfig {
        ModelConfig {
            num_enc_layers: 0,
            num_dec_layers: self.layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            vocab_size: spec.vocab + NUM_RESERVED,
            max_seq_len: spec.seq_len,
            dropout: 0.0,
            decoder_span: self.span,
            tie_decoder_embeddings: true,
            init_std: 0.1,
        }
    }
}

/// How the decoder's h_0 is supplied at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum H0Mode {
    /// The learned embedding of the sequence's own topic.
    True,
    Zero,
    /// The topic embedding of another sequence, by a seeded permutation.
    Shuffled,
}

impl fmt::Display for H0Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            H0Mode::True => "true",
            H0Mode::Zero => "zero",
            H0Mode::Shuffled => "shuffled",
        })
    }
}

impl FromStr for H0Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "true" => Ok(H0Mode::True),
            "zero" => Ok(H0Mode::Zero),
            "shuffled" => Ok(H0Mode::Shuffled),
            _ => Err(Error::Config(format!("unknown h0 mode {s:?} (expected true, zero or shuffled)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TheoryDecoder {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// Mean training loss per step.
    pub losses: Vec<f64>,
}

fn token_ids(seq: &[usize]) -> impl Iterator<Item = u32> + '_ {
    seq.iter().map(|&s| (s + NUM_RESERVED) as u32)
}

/// Logits `[B, n, V]` for the given sequences and per-row topic rows.
fn forward(
    tape: &mut Tape<f32>,
    cfg: &ModelConfig,
    p: &crate::model::BoundParams,
    seqs: &[&[usize]],
    h0_rows: Option<&[usize]>,
) -> Result<Var> {
    let b = seqs.len();
    let h0 = match h0_rows {
        Some(rows) => tape.gather_rows(p.get(TOPIC_TABLE)?, rows, &[b])?,
        None => tape.constant(Tensor::zeros(vec![b, cfg.hidden_dim]))?,
    };
    let ids: Vec<u32> = seqs.iter().flat_map(|s| token_ids(s)).collect();
    Ok(decoder_forward(tape, cfg, p, h0, &ids, b, Mode::Eval)?.logits)
}

/// Trains on fresh sequences every step, with h_0 the sequence's own topic
/// embedding.
pub fn train_theory_decoder(spec: &MarkovSpec, tc: &TheoryDecoderConfig) -> Result<TheoryDecoder> {
    spec.validate()?;
    let cfg = tc.model_config(spec);
    cfg.validate()?;
    if tc.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let full = ParamStore::init(&cfg, tc.seed)?;
    let mut params = ParamStore::default();
    for (name, t) in full.iter() {
        if name.starts_with("dec.") || name == "emb.tok" || name == "emb.pos" {
            params.insert(name, t.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7091c);
    params.insert(
        TOPIC_TABLE,
        Tensor::randn(vec![spec.num_topics(), cfg.hidden_dim], cfg.init_std, &mut rng),
    );
    let mut optim = AdamState::default();
    let mut losses = Vec::with_capacity(tc.steps as usize);
    for step in 1..=tc.steps {
        let batch = generate_markov_corpus(spec, tc.batch_size, step_seed(tc.seed, step))?;
        let seqs: Vec<&[usize]> = batch.sequences.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape)?;
        let logits = forward(&mut tape, &cfg, &bound, &seqs, Some(&batch.topics))?;
        let labels: Vec<i64> = seqs.iter().flat_map(|s| token_ids(s)).map(i64::from).collect();
        let loss = tape.cross_entropy(logits, &labels, IGNORE_INDEX)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numerical {
                step,
                what: "non-finite decoder loss".into(),
            });
        }
        tape.backward(loss)?;
        params.accumulate_grads(&tape, &bound);
        drop(tape);
        adam_step(&mut params, &mut optim, &tc.optim)?;
        losses.push(value);
    }
    Ok(TheoryDecoder { cfg, params, losses })
}

/// Measured decoder loss against the exact entropy floor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub config: String,
    pub h0: H0Mode,
    /// Mean per-token loss over evaluated positions, nats.
    pub expected_loss: f64,
    pub entropy: f64,
    /// `expected_loss - entropy`.
    pub implied_kl: f64,
    pub positions: usize,
    pub sequences: usize,
    /// Standard error of `expected_loss`, from per-sequence means.
    pub standard_error: f64,
}

impl DecompositionReport {
    pub const CSV_HEADER: &'static str = "config,h0,expected_loss,entropy,implied_kl,standard_error,positions,sequences";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.config,
            self.h0,
            self.expected_loss,
            self.entropy,
            self.implied_kl,
            self.standard_error,
            self.positions,
            self.sequences
        )
    }

    /// Non-negativity of the KL term up to two standard errors.
    pub fn kl_consistent(&self) -> bool {
        self.implied_kl >= -2.0 * self.standard_error
    }
}

/// Per-sequence mean losses over positions `t >= order` (0-based), i.e.
/// every position with a full Markov context.
pub fn sequence_losses(decoder: &TheoryDecoder, spec: &MarkovSpec, eval: &MarkovCorpus, h0: H0Mode, seed: u64) -> Result<Vec<f64>> {
    let n = eval.sequences.len();
    let rows: Option<Vec<usize>> = match h0 {
        H0Mode::True => Some(eval.topics.clone()),
        H0Mode::Zero => None,
        H0Mode::Shuffled => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            Some(perm.into_iter().map(|i| eval.topics[i]).collect())
        }
    };
    let v = decoder.cfg.vocab_size;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let seqs: Vec<&[usize]> = eval.sequences[start..end].iter().map(Vec::as_slice).collect();
        let mut tape = Tape::<f32>::new();
        let bound = decoder.params.bind_frozen(&mut tape)?;
        let logits = forward(&mut tape, &decoder.cfg, &bound, &seqs, rows.as_ref().map(|r| &r[start..end]))?;
        let values = tape.value(logits).data();
        for (b, seq) in seqs.iter().enumerate() {
            let len = seq.len();
            let mut total = 0.0;
            for t in spec.order..len {
                let row = &values[(b * len + t) * v..(b * len + t + 1) * v];
                let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
                let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
                total += lse - row[seq[t] + NUM_RESERVED] as f64;
            }
            out.push(total / (len - spec.order) as f64);
        }
    }
    Ok(out)
}

/// Estimates the decoder's expected per-token loss on held-out sequences and
/// compares it with the exact conditional entropy.
pub fn decomposition_check(
    decoder: &TheoryDecoder,
    name: &str,
    spec: &MarkovSpec,
    eval: &MarkovCorpus,
    h0: H0Mode,
    seed: u64,
) -> Result<DecompositionReport> {
    let positions: usize = eval.sequences.iter().map(|s| s.len().saturating_sub(spec.order)).sum();
    if positions < MIN_POSITIONS {
        return Err(Error::InsufficientSample {
            got: positions,
            need: MIN_POSITIONS,
        });
    }
    let per_seq = sequence_losses(decoder, spec, eval, h0, seed)?;
    let (loss, se) = mean_and_se(&per_seq)?;
    let entropy = exact_conditional_entropy(spec)?.nats;
    Ok(DecompositionReport {
        config: name.to_string(),
        h0,
        expected_loss: loss,
        entropy,
        implied_kl: loss - entropy,
        positions,
        sequences: eval.sequences.len(),
        standard_error: se,
    })
}

/// Paired comparison of two h_0 modes on the same sequences: mean loss
/// difference `b - a` and its standard error.
pub fn paired_gap(
    decoder: &TheoryDecoder,
    spec: &MarkovSpec,
    eval: &MarkovCorpus,
    a: H0Mode,
    b: H0Mode,
    seed: u64,
) -> Result<(f64, f64)> {
    let la = sequence_losses(decoder, spec, eval, a, seed)?;
    let lb = sequence_losses(decoder, spec, eval, b, seed)?;
    let diffs: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| y - x).collect();
    mean_and_se(&diffs)
}
