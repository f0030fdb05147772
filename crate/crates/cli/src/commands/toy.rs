use std::path::Path;

use seedenc_core::analysis::MarkovSpec;
use seedenc_core::model::ModelConfig;
use seedenc_core::pretrain::OptimConfig;
use seedenc_core::retrieval::{generate_toy_data, write_pairs, write_qrels, FinetuneConfig, RetrievalDataset, ToyConfig};
use seedenc_core::text::write_corpus;

use super::ablate::{AblateCommand, AblateData};
use super::evaluate::EvaluateCommand;
use super::finetune::{FinetuneCommand, FinetuneData};
use super::pretrain::{PretrainCommand, PretrainData, TrainSection};
use crate::config::{config_text, resolve, Invocation, RunDir};
use crate::error::CliResult;

fn write_split(dir: &Path, name: &str, data: &RetrievalDataset) -> CliResult<()> {
    write_pairs(
        &dir.join(format!("{name}_queries.tsv")),
        data.queries.iter().map(|q| (q.id.as_str(), q.text.as_str())),
    )?;
    write_qrels(&dir.join(format!("{name}_qrels.tsv")), &data.qrels)?;
    Ok(())
}

/// Model, pretraining and fine-tuning settings sized for the toy data.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        num_enc_layers: 4,
        num_dec_layers: 3,
        hidden_dim: 32,
        num_heads: 4,
        ff_dim: 128,
        vocab_size: 5_000,
        max_seq_len: 48,
        ..ModelConfig::default()
    }
}

pub fn toy_train() -> (OptimConfig, TrainSection) {
    let optim = OptimConfig {
        lr_peak: 1e-3,
        warmup_steps: 100,
        total_steps: 1_500,
        ..OptimConfig::default()
    };
    let train = TrainSection {
        batch_size: 16,
        steps: 1_500,
        checkpoint_every: 500,
        ..TrainSection::default()
    };
    (optim, train)
}

pub fn toy_finetune() -> FinetuneConfig {
    let mut ft = FinetuneConfig {
        steps: 500,
        eval_interval: 100,
        ..FinetuneConfig::default()
    };
    ft.optim.lr_peak = 5e-4;
    ft.optim.warmup_steps = 50;
    ft.optim.total_steps = 500;
    ft
}

pub fn run(inv: &Invocation) -> CliResult<()> {
    let cfg: ToyConfig = resolve(inv, &[])?;
    cfg.validate()?;
    let text = config_text(&cfg)?;
    let data = generate_toy_data(&cfg)?;
    let run = RunDir::create(inv, &text)?;
    run.write_manifest("make-toy-data", &text, Some(cfg.seed), &[], &[])?;
    let dir = std::fs::canonicalize(&run.path)?;
    let p = |name: &str| dir.join(name).display().to_string();

    write_corpus(&dir.join("corpus.txt"), &data.pretrain_corpus)?;
    write_pairs(
        &dir.join("collection.tsv"),
        data.train.documents.iter().map(|d| (d.id.as_str(), d.text.as_str())),
    )?;
    write_split(&dir, "train", &data.train)?;
    write_split(&dir, "dev", &data.dev)?;

    let (optim, train) = toy_train();
    let pre = PretrainCommand {
        data: PretrainData {
            corpus: p("corpus.txt"),
            ..PretrainData::default()
        },
        model: toy_model(),
        optim: optim.clone(),
        masking: Default::default(),
        train: train.clone(),
    };
    let ft_data = FinetuneData {
        collection: p("collection.tsv"),
        queries: p("train_queries.tsv"),
        qrels: p("train_qrels.tsv"),
        dev_queries: p("dev_queries.tsv"),
        dev_qrels: p("dev_qrels.tsv"),
        max_query_len: 8,
        ..FinetuneData::default()
    };
    let ft = FinetuneCommand {
        data: ft_data,
        finetune: toy_finetune(),
    };
    let ev = EvaluateCommand {
        collection: p("collection.tsv"),
        queries: p("dev_queries.tsv"),
        qrels: p("dev_qrels.tsv"),
        max_query_len: 8,
        ..EvaluateCommand::default()
    };
    let ab = AblateCommand {
        data: AblateData {
            corpus: p("corpus.txt"),
            collection: p("collection.tsv"),
            queries: p("train_queries.tsv"),
            qrels: p("train_qrels.tsv"),
            dev_queries: p("dev_queries.tsv"),
            dev_qrels: p("dev_qrels.tsv"),
            max_query_len: 8,
            ..AblateData::default()
        },
        model: toy_model(),
        optim,
        masking: Default::default(),
        train: TrainSection {
            checkpoint_every: 0,
            ..train
        },
        finetune: FinetuneConfig {
            eval_interval: 0,
            ..toy_finetune()
        },
        grid: Default::default(),
    };
    std::fs::write(dir.join("pretrain.toml"), config_text(&pre)?)?;
    std::fs::write(dir.join("finetune.toml"), config_text(&ft)?)?;
    std::fs::write(dir.join("evaluate.toml"), config_text(&ev)?)?;
    std::fs::write(dir.join("ablate.toml"), config_text(&ab)?)?;
    MarkovSpec::random(4, 8, 1, 3, 24, cfg.seed).save(&dir.join("markov_topics.toml"))?;
    MarkovSpec::random(1, 4, 3, 2, 24, cfg.seed).save(&dir.join("markov_order3.toml"))?;
    println!(
        "{} documents, {} train and {} dev queries",
        data.train.documents.len(),
        data.train.queries.len(),
        data.dev.queries.len()
    );
    println!("{}", dir.display());
    Ok(())
}
