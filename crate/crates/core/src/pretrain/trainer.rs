use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use seedenc_tensor::{Tape, TensorError};

use super::checkpoint::{Checkpoint, RngState};
use super::loss::combined_loss;
use super::optim::{adam_step, AdamState, OptimConfig};
use crate::model::{Mode, ModelConfig, ParamStore};
use crate::text::{create_mlm_batch, MaskingConfig, TokenSequence};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_mlm,loss_dec";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best-mlm.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    pub batch_size: usize,
    /// Steps to run; may be less than `optim.total_steps`.
    pub steps: u64,
    pub seed: u64,
    /// Coefficient of the decoder loss; 0 gives plain MLM pretraining.
    #[serde(default = "one")]
    pub decoder_weight: f64,
    /// 0 disables periodic checkpoints.
    #[serde(default = "default_interval")]
    pub checkpoint_every: u64,
    #[serde(default = "default_keep")]
    pub keep_last: usize,
}

fn one() -> f64 {
    1.0
}

fn default_interval() -> u64 {
    1_000
}

fn default_keep() -> usize {
    3
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.masking.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.decoder_weight >= 0.0 && self.decoder_weight.is_finite()) {
            return Err(Error::Config(format!("decoder_weight must be finite and non-negative, got {}", self.decoder_weight)));
        }
        if self.optim.total_steps == 0 || self.optim.warmup_steps > self.optim.total_steps {
            return Err(Error::Config("need 0 <= warmup_steps <= total_steps, total_steps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub mlm: f64,
    pub dec: f64,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.lr, self.total, self.mlm, self.dec)
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics file has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad metrics row {l:?}")))
            };
            Ok(LossRecord {
                step: f
                    .first()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad metrics row {l:?}")))?,
                lr: num(1)?,
                total: num(2)?,
                mlm: num(3)?,
                dec: num(4)?,
            })
        })
        .collect()
}

pub struct PretrainOutcome {
    pub params: ParamStore<f32>,
    pub optim: AdamState,
    pub log: Vec<LossRecord>,
    /// Path of the final checkpoint, when an output directory was given.
    pub final_checkpoint: Option<PathBuf>,
}

/// Seed for the randomness of step `step` (1-based). Depends on nothing else,
/// so batch content is independent of how the run was interrupted.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.random()
}

/// Documents for step `step`, sampled uniformly with replacement.
pub fn batch_indices(seed: u64, step: u64, corpus_len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, step));
    (0..batch_size).map(|_| rng.random_range(0..corpus_len)).collect()
}

fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

fn numerical(step: u64, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite(what)) => Error::Numerical {
            step,
            what: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

struct Writer {
    dir: PathBuf,
    metrics: fs::File,
    best_mlm: f64,
}

impl Writer {
    fn open(dir: &Path, resume_step: Option<u64>) -> Result<Writer> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let path = dir.join(METRICS_FILE);
        let mut kept = Vec::new();
        if let (Some(step), Ok(text)) = (resume_step, fs::read_to_string(&path)) {
            kept = parse_metrics(&text)?
                .into_iter()
                .filter(|r| r.step <= step)
                .collect();
        }
        let mut metrics = fs::File::create(&path)?;
        writeln!(metrics, "{METRICS_HEADER}")?;
        for r in &kept {
            writeln!(metrics, "{}", r.csv_row())?;
        }
        let best_mlm = Checkpoint::load(&dir.join("checkpoints").join(BEST_CHECKPOINT))
            .ok()
            .and_then(|c| c.meta.get("interval_mlm").and_then(|s| s.parse().ok()))
            .unwrap_or(f64::INFINITY);
        Ok(Writer {
            dir: dir.to_path_buf(),
            metrics,
            best_mlm,
        })
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint, interval_mlm: f64, keep_last: usize) -> Result<PathBuf> {
        let cdir = self.dir.join("checkpoints");
        let path = cdir.join(checkpoint_name(ckpt.step));
        ckpt.save(&path)?;
        if interval_mlm < self.best_mlm {
            self.best_mlm = interval_mlm;
            ckpt.save(&cdir.join(BEST_CHECKPOINT))?;
        }
        let mut steps: Vec<PathBuf> = fs::read_dir(&cdir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("step-") && n.ends_with(".ckpt"))
            })
            .collect();
        steps.sort();
        let excess = steps.len().saturating_sub(keep_last.max(1));
        for old in &steps[..excess] {
            fs::remove_file(old)?;
        }
        self.metrics.flush()?;
        Ok(path)
    }
}

/// Runs masked-LM plus weak-decoder pretraining over `corpus`.
///
/// With `out_dir`, metrics go to `metrics.csv` and checkpoints to
/// `checkpoints/`. With `resume`, training continues from that checkpoint
/// and reproduces the uninterrupted run exactly.
pub fn pretrain(
    corpus: &[TokenSequence],
    cfg: &PretrainConfig,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    if let Some(s) = corpus.iter().find(|s| s.len() > cfg.model.max_seq_len) {
        return Err(Error::SequenceTooLong {
            len: s.len(),
            max: cfg.model.max_seq_len,
        });
    }
    let (mut params, mut optim, start) = match resume {
        Some(ckpt) => {
            if ckpt.model != cfg.model {
                return Err(Error::Config("checkpoint model config differs from the run config".into()));
            }
            if ckpt.rng.seed != cfg.seed {
                return Err(Error::Config(format!("checkpoint seed {} differs from run seed {}", ckpt.rng.seed, cfg.seed)));
            }
            ckpt.validate(true)?;
            let optim = ckpt.optim.clone().unwrap_or_default();
            (ckpt.params, optim, ckpt.step)
        }
        None => (ParamStore::init(&cfg.model, cfg.seed)?, AdamState::default(), 0),
    };
    let mut writer = match out_dir {
        Some(d) => Some(Writer::open(d, (start > 0).then_some(start))?),
        None => None,
    };
    let meta: BTreeMap<String, String> = BTreeMap::from([(
        "pretrain_config".to_string(),
        toml::to_string(cfg).map_err(|e| Error::Format(e.to_string()))?,
    )]);
    let mut log = Vec::new();
    let mut final_checkpoint = None;
    let mut interval = (0.0, 0usize);
    for step in start + 1..=cfg.steps {
        let s = step_seed(cfg.seed, step);
        let docs: Vec<TokenSequence> = batch_indices(cfg.seed, step, corpus.len(), cfg.batch_size)
            .into_iter()
            .map(|i| corpus[i].clone())
            .collect();
        let batch = create_mlm_batch(&docs, cfg.model.vocab_size, &cfg.masking, s)?;
        if batch.num_masked() == 0 {
            log::warn!("step {step}: no masked positions, batch skipped");
            continue;
        }
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape)?;
        let parts = combined_loss(&mut tape, &cfg.model, &bound, &batch, cfg.decoder_weight, Mode::Train { seed: s })
            .map_err(|e| numerical(step, e))?;
        let rec = LossRecord {
            step,
            lr: 0.0,
            total: tape.value(parts.total).item() as f64,
            mlm: tape.value(parts.mlm).item() as f64,
            dec: tape.value(parts.dec).item() as f64,
        };
        if ![rec.total, rec.mlm, rec.dec].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical {
                step,
                what: "non-finite loss".into(),
            });
        }
        tape.backward(parts.total)?;
        params.accumulate_grads(&tape, &bound);
        drop(tape);
        let stats = adam_step(&mut params, &mut optim, &cfg.optim)?;
        let rec = LossRecord { lr: stats.lr, ..rec };
        interval.0 += rec.mlm;
        interval.1 += 1;
        if let Some(w) = writer.as_mut() {
            writeln!(w.metrics, "{}", rec.csv_row())?;
        }
        log.push(rec);
        let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if let (Some(w), true) = (writer.as_mut(), due || step == cfg.steps) {
            let interval_mlm = interval.0 / interval.1.max(1) as f64;
            let mut meta = meta.clone();
            meta.insert("interval_mlm".into(), interval_mlm.to_string());
            let ckpt = Checkpoint {
                step,
                rng: RngState {
                    seed: cfg.seed,
                    next_step: step + 1,
                },
                model: cfg.model.clone(),
                meta,
                params: params.clone(),
                optim: Some(optim.clone()),
            };
            final_checkpoint = Some(w.checkpoint(&ckpt, interval_mlm, cfg.keep_last)?);
            interval = (0.0, 0);
        }
    }
    if let Some(w) = writer.as_mut() {
        w.metrics.flush()?;
    }
    Ok(PretrainOutcome {
        params,
        optim,
        log,
        final_checkpoint,
    })
}
