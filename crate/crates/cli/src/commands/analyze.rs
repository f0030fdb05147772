use serde::{Deserialize, Serialize};
use seedenc_core::analysis::{cls_diversity_profile, decoder_cls_dependency, line_plot_svg};
use seedenc_core::text::{read_corpus, tokenize};

use super::{load_checkpoint, load_vocab, write_csv};
use crate::config::{config_text, require_path, resolve, Invocation, RunDir};
use crate::error::{usage, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analysis {
    Diversity,
    Dependency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeCommand {
    pub analysis: Analysis,
    pub checkpoints: Vec<String>,
    /// One per checkpoint; defaults to the checkpoint paths.
    pub labels: Vec<String>,
    pub corpus: String,
    /// Shared vocabulary; defaults to the first checkpoint's.
    pub vocab: String,
    /// Truncation lengths in words, for diversity.
    pub lengths: Vec<usize>,
    pub pairs: usize,
    /// Decoder positions, for dependency; empty means every position.
    pub positions: Vec<usize>,
    pub max_sequences: usize,
    pub seed: u64,
}

impl Default for AnalyzeCommand {
    fn default() -> Self {
        AnalyzeCommand {
            analysis: Analysis::Diversity,
            checkpoints: Vec::new(),
            labels: Vec::new(),
            corpus: String::new(),
            vocab: String::new(),
            lengths: vec![8, 16, 32, 64, 128],
            pairs: 500,
            positions: Vec::new(),
            max_sequences: 256,
            seed: 0,
        }
    }
}

pub fn run(inv: &Invocation) -> CliResult<()> {
    let cmd: AnalyzeCommand = resolve(inv, &[])?;
    let text = config_text(&cmd)?;
    if cmd.checkpoints.is_empty() {
        return Err(usage("analyze needs at least one checkpoint"));
    }
    if !cmd.labels.is_empty() && cmd.labels.len() != cmd.checkpoints.len() {
        return Err(usage(format!(
            "{} labels given for {} checkpoints",
            cmd.labels.len(),
            cmd.checkpoints.len()
        )));
    }
    let corpus_path = require_path("corpus", &cmd.corpus)?;
    let docs = read_corpus(&corpus_path)?;
    let mut models = Vec::new();
    for (i, c) in cmd.checkpoints.iter().enumerate() {
        let (ckpt, path) = load_checkpoint("checkpoints", c)?;
        let label = cmd.labels.get(i).cloned().unwrap_or_else(|| c.clone());
        models.push((label, ckpt, path));
    }
    let (vocab, vocab_path) = load_vocab(&cmd.vocab, &models[0].2)?;

    let run = RunDir::create(inv, &text)?;
    let mut inputs = vec![corpus_path.as_path(), vocab_path.as_path()];
    inputs.extend(models.iter().map(|m| m.2.as_path()));
    run.write_manifest("analyze", &text, Some(cmd.seed), &inputs, &[])?;

    let mut rows = Vec::new();
    let mut series = Vec::new();
    match cmd.analysis {
        Analysis::Diversity => {
            for (label, ckpt, _) in &models {
                ckpt.validate(false)?;
                let corpus: Vec<_> = docs.iter().map(|d| tokenize(d, &vocab, ckpt.model.max_seq_len)).collect();
                let profile = cls_diversity_profile(&ckpt.model, &ckpt.params, &corpus, &cmd.lengths, cmd.pairs, cmd.seed)?;
                for r in &profile.rows {
                    rows.push(format!("{label},{},{},{},{}", r.length, r.mean, r.std, r.pairs));
                }
                series.push((label.clone(), profile.rows.iter().map(|r| (r.length as f64, r.mean)).collect()));
            }
            write_csv(&run.join("diversity.csv"), "label,length,mean_cosine,std,pairs", rows)?;
            let svg = line_plot_svg("CLS cosine between random documents", "length (words)", "mean cosine", &series);
            std::fs::write(run.join("diversity.svg"), svg)?;
        }
        Analysis::Dependency => {
            for (label, ckpt, _) in &models {
                let corpus: Vec<_> = docs
                    .iter()
                    .take(cmd.max_sequences.max(1))
                    .map(|d| tokenize(d, &vocab, ckpt.model.max_seq_len))
                    .collect();
                let positions: Vec<usize> = if cmd.positions.is_empty() {
                    (0..ckpt.model.max_seq_len).collect()
                } else {
                    cmd.positions.clone()
                };
                let curve = decoder_cls_dependency(&ckpt.model, &ckpt.params, &corpus, &positions)?;
                for p in &curve.points {
                    rows.push(format!("{label},{},{},{}", p.position, p.mean_cosine, p.sequences));
                }
                series.push((
                    label.clone(),
                    curve.points.iter().map(|p| (p.position as f64, p.mean_cosine)).collect(),
                ));
            }
            write_csv(&run.join("dependency.csv"), "label,position,mean_cosine,sequences", rows)?;
            let svg = line_plot_svg("Decoder state cosine to h0", "position", "mean cosine", &series);
            std::fs::write(run.join("dependency.svg"), svg)?;
        }
    }
    println!("{}", run.path.display());
    Ok(())
}
