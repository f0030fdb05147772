use std::io::Write;
use std::path::{Path, PathBuf};

use seedenc_core::pretrain::Checkpoint;
use seedenc_core::text::Vocabulary;

use crate::config::{require_path, Invocation};
use crate::error::{usage, CliResult};

mod ablate;
mod analyze;
mod evaluate;
mod finetune;
mod pretrain;
mod theory;
mod toy;

pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const ENCODER_CHECKPOINT: &str = "encoder.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn dispatch(inv: &Invocation) -> CliResult<()> {
    match inv.command.as_str() {
        "pretrain" => pretrain::run(inv),
        "finetune" => finetune::run(inv),
        "evaluate" => evaluate::run(inv),
        "analyze" => analyze::run(inv),
        "ablate" => ablate::run(inv),
        "verify-theory" => theory::run(inv),
        "make-toy-data" => toy::run(inv),
        other => Err(usage(format!("unknown command {other:?}; see `seedenc help`"))),
    }
}

/// A checkpoint file, or a run directory holding `encoder.ckpt`,
/// `model.ckpt` or `checkpoints/step-*.ckpt` (newest wins, in that order).
pub fn resolve_checkpoint(path: &Path) -> CliResult<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    for name in [ENCODER_CHECKPOINT, MODEL_CHECKPOINT] {
        if path.join(name).is_file() {
            return Ok(path.join(name));
        }
    }
    let mut steps: Vec<PathBuf> = std::fs::read_dir(path.join("checkpoints"))
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    steps.retain(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("step-")));
    steps.sort();
    steps.pop().ok_or_else(|| {
        seedenc_core::Error::Data(format!("no checkpoint found in run directory {}", path.display())).into()
    })
}

pub fn load_checkpoint(field: &str, value: &str) -> CliResult<(Checkpoint, PathBuf)> {
    let path = resolve_checkpoint(&require_path(field, value)?)?;
    Ok((Checkpoint::load(&path)?, path))
}

/// `vocab` when set, otherwise `vocab.txt` in the checkpoint's run directory.
pub fn resolve_vocab(vocab: &str, checkpoint: &Path) -> CliResult<PathBuf> {
    if !vocab.is_empty() {
        return Ok(PathBuf::from(vocab));
    }
    checkpoint
        .ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join(VOCAB_FILE))
        .find(|p| p.is_file())
        .ok_or_else(|| usage(format!("no vocab given and none found beside {}", checkpoint.display())))
}

pub fn load_vocab(vocab: &str, checkpoint: &Path) -> CliResult<(Vocabulary, PathBuf)> {
    let path = resolve_vocab(vocab, checkpoint)?;
    Ok((Vocabulary::read(&path)?, path))
}

pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

/// Token length for documents: `len` if set, else the model maximum.
pub fn doc_len(len: usize, max_seq_len: usize) -> usize {
    if len == 0 {
        max_seq_len
    } else {
        len.min(max_seq_len)
    }
}
