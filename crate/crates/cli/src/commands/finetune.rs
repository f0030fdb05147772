use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use seedenc_core::model::ModelConfig;
use seedenc_core::pretrain::{Checkpoint, RngState};
use seedenc_core::retrieval::{
    eval_header, finetune, initial_triples, write_triples, FinetuneConfig, FinetuneOutcome, Objective,
    RetrievalDataset, TokenizedDataset, FINETUNE_HEADER,
};
use seedenc_core::text::Vocabulary;

use super::{doc_len, load_checkpoint, load_vocab, write_csv, ENCODER_CHECKPOINT, VOCAB_FILE};
use crate::config::{config_text, require_path, resolve, Invocation, RunDir};
use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneData {
    /// Checkpoint file or pretraining run directory.
    pub checkpoint: String,
    /// Defaults to the checkpoint run's vocabulary.
    pub vocab: String,
    pub collection: String,
    pub queries: String,
    pub qrels: String,
    /// Optional dev split over the same collection.
    pub dev_queries: String,
    pub dev_qrels: String,
    pub max_query_len: usize,
    /// 0 uses the model's maximum length.
    pub max_doc_len: usize,
}

impl Default for FinetuneData {
    fn default() -> Self {
        FinetuneData {
            checkpoint: String::new(),
            vocab: String::new(),
            collection: String::new(),
            queries: String::new(),
            qrels: String::new(),
            dev_queries: String::new(),
            dev_qrels: String::new(),
            max_query_len: 16,
            max_doc_len: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneCommand {
    pub data: FinetuneData,
    pub finetune: FinetuneConfig,
}

pub const ALIASES: &[(&str, &str)] = &[
    ("lr", "finetune.optim.lr_peak"),
    ("seed", "finetune.seed"),
    ("steps", "finetune.steps"),
    ("batch_size", "finetune.batch_size"),
];

/// Train split plus optional dev split, tokenized for `model`.
pub struct Splits {
    pub train: TokenizedDataset,
    pub dev: Option<TokenizedDataset>,
    pub inputs: Vec<PathBuf>,
}

pub fn load_splits(data: &FinetuneData, vocab: &Vocabulary, model: &ModelConfig) -> CliResult<Splits> {
    let collection = require_path("data.collection", &data.collection)?;
    let queries = require_path("data.queries", &data.queries)?;
    let qrels = require_path("data.qrels", &data.qrels)?;
    let qlen = doc_len(data.max_query_len, model.max_seq_len);
    let dlen = doc_len(data.max_doc_len, model.max_seq_len);
    let train = RetrievalDataset::load(&collection, &queries, &qrels)?.tokenize(vocab, qlen, dlen);
    let mut inputs = vec![collection.clone(), queries, qrels];
    let dev = match (data.dev_queries.is_empty(), data.dev_qrels.is_empty()) {
        (true, true) => None,
        (false, false) => {
            let (q, r) = (PathBuf::from(&data.dev_queries), PathBuf::from(&data.dev_qrels));
            let dev = RetrievalDataset::load(&collection, &q, &r)?.tokenize(vocab, qlen, dlen);
            inputs.extend([q, r]);
            Some(dev)
        }
        _ => return Err(crate::error::usage("dev_queries and dev_qrels must be given together")),
    };
    Ok(Splits { train, dev, inputs })
}

pub fn encoder_checkpoint(model: &ModelConfig, ft: &FinetuneConfig, out: &FinetuneOutcome) -> CliResult<Checkpoint> {
    let meta = BTreeMap::from([(
        "finetune_config".to_string(),
        toml::to_string(ft).map_err(|e| crate::error::usage(e.to_string()))?,
    )]);
    Ok(Checkpoint {
        step: ft.steps,
        rng: RngState {
            seed: ft.seed,
            next_step: ft.steps + 1,
        },
        model: model.clone(),
        meta,
        params: out.params.clone(),
        optim: None,
    })
}

pub fn run(inv: &Invocation) -> CliResult<()> {
    let cmd: FinetuneCommand = resolve(inv, ALIASES)?;
    cmd.finetune.validate()?;
    let text = config_text(&cmd)?;
    let (ckpt, ckpt_path) = load_checkpoint("data.checkpoint", &cmd.data.checkpoint)?;
    ckpt.validate(false)?;
    let (vocab, vocab_path) = load_vocab(&cmd.data.vocab, &ckpt_path)?;
    let splits = load_splits(&cmd.data, &vocab, &ckpt.model)?;

    let run = RunDir::create(inv, &text)?;
    let mut inputs: Vec<&std::path::Path> = vec![&ckpt_path, &vocab_path];
    inputs.extend(splits.inputs.iter().map(PathBuf::as_path));
    run.write_manifest("finetune", &text, Some(cmd.finetune.seed), &inputs, &[])?;
    vocab.write(&run.join(VOCAB_FILE))?;

    let ft = &cmd.finetune;
    let out = finetune(&ckpt.model, &ckpt.params, &splits.train, splits.dev.as_ref(), ft)?;
    if ft.objective == Objective::Triplet {
        let triples = initial_triples(&splits.train, &out.train_queries, ft)?;
        write_triples(&run.join("triples.tsv"), &splits.train, &vocab, &triples)?;
    }
    write_csv(&run.join("finetune_metrics.csv"), FINETUNE_HEADER, out.log.iter().map(|r| r.csv_row()))?;
    if !out.eval_log.is_empty() {
        write_csv(&run.join("eval_log.csv"), &eval_header(ft.eval_k), out.eval_log.iter().map(|r| r.csv_row()))?;
    }
    encoder_checkpoint(&ckpt.model, ft, &out)?.save(&run.join(ENCODER_CHECKPOINT))?;
    if let Some(e) = out.eval_log.last() {
        println!("dev mrr@{} {:.4} at step {}", ft.eval_k, e.mrr, e.step);
    }
    println!("{}", run.path.display());
    Ok(())
}
