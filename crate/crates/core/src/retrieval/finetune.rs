use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use seedenc_tensor::Tape;

use super::data::TokenizedDataset;
use super::encode::{encode_on_tape, Metric};
use super::losses::{in_batch_negative_loss, pair_scores, triplet_loss_batch};
use super::negatives::{mine_lexical_negatives, refresh_hard_negatives, select_label_subset, TripletExample};
use crate::eval::{mrr_at_k, retrieve};
use crate::model::{Mode, ModelConfig, ParamStore};
use crate::pretrain::{adam_step, step_seed, AdamState, OptimConfig};
use crate::text::TokenSequence;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Triplet,
    InBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    #[default]
    Bm25,
    Ance,
}

macro_rules! keyword_enum {
    ($ty:ty, $($name:literal => $v:expr),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().replace('-', "_").as_str() {
                    $($name => Ok($v),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?} (expected one of: ", $($name, " ",)+ ")"),
                        s
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Objective, "triplet" => Objective::Triplet, "in_batch" => Objective::InBatch);
keyword_enum!(NegativeSource, "bm25" => NegativeSource::Bm25, "ance" => NegativeSource::Ance);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub objective: Objective,
    pub negatives: NegativeSource,
    /// Steps between hard-negative refreshes under `negatives = "ance"`.
    pub refresh_every: u64,
    pub metric: Metric,
    pub label_fraction: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Negatives per query when mining.
    pub per_query: usize,
    pub bm25_depth: usize,
    pub ance_depth: usize,
    /// Steps between dev evaluations; 0 evaluates only before and after.
    pub eval_interval: u64,
    pub eval_k: usize,
    pub optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            objective: Objective::Triplet,
            negatives: NegativeSource::Bm25,
            refresh_every: 500,
            metric: Metric::Dot,
            label_fraction: 1.0,
            steps: 2_000,
            batch_size: 16,
            seed: 0,
            per_query: 4,
            bm25_depth: 100,
            ance_depth: 200,
            eval_interval: 500,
            eval_k: 10,
            optim: OptimConfig {
                lr_peak: 1e-4,
                warmup_steps: 100,
                total_steps: 2_000,
                ..OptimConfig::default()
            },
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if self.batch_size == 0 || self.per_query == 0 || self.eval_k == 0 {
            return Err(Error::Config("batch_size, per_query and eval_k must be positive".into()));
        }
        if self.objective == Objective::InBatch && self.batch_size < 2 {
            return Err(Error::Config("in-batch negatives need batch_size >= 2".into()));
        }
        if self.objective == Objective::InBatch && self.negatives == NegativeSource::Ance {
            return Err(Error::Config("ANCE negatives apply to the triplet objective only".into()));
        }
        if self.negatives == NegativeSource::Ance && self.refresh_every == 0 {
            return Err(Error::Config("refresh_every must be positive for ANCE negatives".into()));
        }
        if self.optim.warmup_steps > self.optim.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub mrr: f64,
}

pub const FINETUNE_HEADER: &str = "step,lr,loss";

impl FinetuneRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e}", self.step, self.lr, self.loss)
    }
}

impl EvalRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{}", self.step, self.mrr)
    }
}

pub fn eval_header(k: usize) -> String {
    format!("step,mrr@{k}")
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Encoder parameters after the last step.
    pub params: ParamStore,
    pub optim: AdamState,
    pub log: Vec<FinetuneRecord>,
    /// Dev MRR before training, every `eval_interval` steps, and at the end.
    pub eval_log: Vec<EvalRecord>,
    /// Indices of the training queries used.
    pub train_queries: Vec<usize>,
}

/// Disjoint (query, positive) pairs, none relevant to another pair's query.
fn in_batch_pairs(
    data: &TokenizedDataset,
    pairs: &[(usize, usize)],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(batch_size);
    for _ in 0..batch_size * 20 {
        if out.len() == batch_size {
            break;
        }
        let (q, p) = pairs[rng.random_range(0..pairs.len())];
        let clash = out
            .iter()
            .any(|&(q2, p2)| q2 == q || p2 == p || data.is_relevant(q, p2) || data.is_relevant(q2, p));
        if !clash {
            out.push((q, p));
        }
    }
    out
}

fn dev_mrr(cfg: &ModelConfig, params: &ParamStore, dev: &TokenizedDataset, ft: &FinetuneConfig) -> Result<f64> {
    let run = retrieve(cfg, params, dev, ft.metric, ft.eval_k)?;
    mrr_at_k(&run, &dev.qrels, ft.eval_k)
}

/// BM25 triples mined before the first fine-tuning step.
pub fn initial_triples(data: &TokenizedDataset, queries: &[usize], ft: &FinetuneConfig) -> Result<Vec<TripletExample>> {
    mine_lexical_negatives(data, queries, ft.per_query, ft.bm25_depth, step_seed(ft.seed, 0))
}

/// Fine-tunes the encoder part of `params` as a shared query/document
/// encoder. Every random choice at step `t` derives from `(seed, t)`.
pub fn finetune(
    cfg: &ModelConfig,
    params: &ParamStore,
    train: &TokenizedDataset,
    dev: Option<&TokenizedDataset>,
    ft: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    ft.validate()?;
    cfg.validate()?;
    let too_long = train.docs.iter().chain(&train.queries).find(|s| s.len() > cfg.max_seq_len);
    if let Some(s) = too_long {
        return Err(Error::SequenceTooLong {
            len: s.len(),
            max: cfg.max_seq_len,
        });
    }
    let train_queries = select_label_subset(train.queries.len(), ft.label_fraction, ft.seed)?;
    let mut params = params.encoder_only();
    let mut optim = AdamState::default();
    let mut triples = match ft.objective {
        Objective::Triplet => initial_triples(train, &train_queries, ft)?,
        Objective::InBatch => Vec::new(),
    };
    let pairs: Vec<(usize, usize)> = train_queries
        .iter()
        .flat_map(|&q| train.relevant(q).into_iter().map(move |p| (q, p)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::MissingQrels(
            train_queries.iter().map(|&q| train.query_ids[q].clone()).collect(),
        ));
    }
    if ft.objective == Objective::Triplet && triples.is_empty() {
        return Err(Error::Data("no training triples could be mined".into()));
    }

    let mut log = Vec::new();
    let mut eval_log = Vec::new();
    if let Some(dev) = dev {
        eval_log.push(EvalRecord {
            step: 0,
            mrr: dev_mrr(cfg, &params, dev, ft)?,
        });
    }
    for step in 1..=ft.steps {
        let s = step_seed(ft.seed, step);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mode = Mode::Train { seed: s };
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape)?;
        let loss = match ft.objective {
            Objective::Triplet => {
                let batch: Vec<TripletExample> =
                    (0..ft.batch_size).map(|_| triples[rng.random_range(0..triples.len())]).collect();
                let queries: Vec<TokenSequence> = batch.iter().map(|t| train.queries[t.query].clone()).collect();
                let docs: Vec<TokenSequence> = batch
                    .iter()
                    .map(|t| train.docs[t.positive].clone())
                    .chain(batch.iter().map(|t| train.docs[t.negative].clone()))
                    .collect();
                let q = encode_on_tape(&mut tape, cfg, &bound, &queries, mode.fork(0))?;
                let d = encode_on_tape(&mut tape, cfg, &bound, &docs, mode.fork(1))?;
                let b = ft.batch_size;
                let pos = tape.gather_rows(d, &(0..b).collect::<Vec<_>>(), &[b])?;
                let neg = tape.gather_rows(d, &(b..2 * b).collect::<Vec<_>>(), &[b])?;
                let s_pos = pair_scores(&mut tape, q, pos, ft.metric)?;
                let s_neg = pair_scores(&mut tape, q, neg, ft.metric)?;
                triplet_loss_batch(&mut tape, s_pos, s_neg)?
            }
            Objective::InBatch => {
                let batch = in_batch_pairs(train, &pairs, ft.batch_size, &mut rng);
                if batch.len() < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "step {step}: only {} compatible query/positive pairs",
                        batch.len()
                    )));
                }
                let queries: Vec<TokenSequence> = batch.iter().map(|&(q, _)| train.queries[q].clone()).collect();
                let docs: Vec<TokenSequence> = batch.iter().map(|&(_, p)| train.docs[p].clone()).collect();
                let q = encode_on_tape(&mut tape, cfg, &bound, &queries, mode.fork(0))?;
                let d = encode_on_tape(&mut tape, cfg, &bound, &docs, mode.fork(1))?;
                in_batch_negative_loss(&mut tape, q, d)?
            }
        };
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numerical {
                step,
                what: "non-finite fine-tuning loss".into(),
            });
        }
        tape.backward(loss).map_err(|e| Error::Numerical {
            step,
            what: e.to_string(),
        })?;
        params.accumulate_grads(&tape, &bound);
        drop(tape);
        let stats = adam_step(&mut params, &mut optim, &ft.optim)?;
        log.push(FinetuneRecord {
            step,
            lr: stats.lr,
            loss: value,
        });
        if ft.negatives == NegativeSource::Ance && step % ft.refresh_every == 0 && step < ft.steps {
            triples = refresh_hard_negatives(
                cfg,
                &params,
                train,
                &train_queries,
                ft.per_query,
                ft.ance_depth,
                ft.metric,
                step_seed(ft.seed.wrapping_add(1), step),
            )?;
        }
        if let Some(dev) = dev {
            let due = ft.eval_interval > 0 && step % ft.eval_interval == 0;
            if due || step == ft.steps {
                eval_log.push(EvalRecord {
                    step,
                    mrr: dev_mrr(cfg, &params, dev, ft)?,
                });
            }
        }
    }
    Ok(FinetuneOutcome {
        params,
        optim,
        log,
        eval_log,
        train_queries,
    })
}
