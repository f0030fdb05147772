use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use seedenc_core::model::ModelConfig;
use seedenc_core::pretrain::{pretrain, Checkpoint, OptimConfig, PretrainConfig};
use seedenc_core::text::{build_vocab, read_corpus, tokenize, MaskingConfig, TokenSequence, Vocabulary};

use super::{MODEL_CHECKPOINT, VOCAB_FILE};
use crate::config::{config_text, require_path, resolve, Invocation, RunDir};
use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainData {
    pub corpus: String,
    /// Existing vocabulary; built from the corpus when empty.
    pub vocab: String,
    pub min_freq: usize,
    /// Checkpoint to continue from.
    pub resume: String,
}

impl Default for PretrainData {
    fn default() -> Self {
        PretrainData {
            corpus: String::new(),
            vocab: String::new(),
            min_freq: 1,
            resume: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub decoder_weight: f64,
    pub checkpoint_every: u64,
    pub keep_last: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 32,
            steps: 20_000,
            seed: 0,
            decoder_weight: 1.0,
            checkpoint_every: 1_000,
            keep_last: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainCommand {
    pub data: PretrainData,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub masking: MaskingConfig,
    pub train: TrainSection,
}

pub const ALIASES: &[(&str, &str)] = &[
    ("decoder_span", "model.decoder_span"),
    ("span", "model.decoder_span"),
    ("decoder_layers", "model.num_dec_layers"),
    ("encoder_layers", "model.num_enc_layers"),
    ("lr", "optim.lr_peak"),
    ("seed", "train.seed"),
    ("steps", "train.steps"),
    ("batch_size", "train.batch_size"),
];

impl PretrainCommand {
    /// The core config for a vocabulary of `vocab_size` entries.
    pub fn core_config(&self, vocab_size: usize) -> PretrainConfig {
        PretrainConfig {
            model: ModelConfig {
                vocab_size,
                ..self.model.clone()
            },
            optim: self.optim.clone(),
            masking: self.masking.clone(),
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            seed: self.train.seed,
            decoder_weight: self.train.decoder_weight,
            checkpoint_every: self.train.checkpoint_every,
            keep_last: self.train.keep_last,
        }
    }
}

/// Reads `vocab` or builds one of at most `max_size` entries from `docs`.
pub fn corpus_vocab(docs: &[String], vocab: &str, max_size: usize, min_freq: usize) -> CliResult<Vocabulary> {
    Ok(if vocab.is_empty() {
        build_vocab(docs.iter(), max_size, min_freq)?
    } else {
        Vocabulary::read(&PathBuf::from(vocab))?
    })
}

pub fn tokenize_corpus(docs: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    docs.iter().map(|d| tokenize(d, vocab, max_len)).collect()
}

pub fn run(inv: &Invocation) -> CliResult<()> {
    let cmd: PretrainCommand = resolve(inv, ALIASES)?;
    let text = config_text(&cmd)?;
    let corpus_path = require_path("data.corpus", &cmd.data.corpus)?;
    let docs = read_corpus(&corpus_path)?;
    let vocab = corpus_vocab(&docs, &cmd.data.vocab, cmd.model.vocab_size, cmd.data.min_freq)?;
    let cfg = cmd.core_config(vocab.len());
    cfg.validate()?;
    let corpus = tokenize_corpus(&docs, &vocab, cfg.model.max_seq_len);
    let resume = if cmd.data.resume.is_empty() {
        None
    } else {
        Some(Checkpoint::load(&PathBuf::from(&cmd.data.resume))?)
    };

    let run = RunDir::create(inv, &text)?;
    vocab.write(&run.join(VOCAB_FILE))?;
    let mut inputs = vec![corpus_path.as_path()];
    let vocab_in = PathBuf::from(&cmd.data.vocab);
    if !cmd.data.vocab.is_empty() {
        inputs.push(&vocab_in);
    }
    let resume_in = PathBuf::from(&cmd.data.resume);
    if resume.is_some() {
        inputs.push(&resume_in);
    }
    run.write_manifest(
        "pretrain",
        &text,
        Some(cfg.seed),
        &inputs,
        &[("vocab_size", vocab.len().to_string())],
    )?;
    let out = pretrain(&corpus, &cfg, Some(&run.path), resume)?;
    if let Some(last) = &out.final_checkpoint {
        std::fs::copy(last, run.join(MODEL_CHECKPOINT))?;
    }
    if let Some(r) = out.log.last() {
        println!("step {} loss {:.4} (mlm {:.4}, decoder {:.4})", r.step, r.total, r.mlm, r.dec);
    }
    println!("{}", run.path.display());
    Ok(())
}
