use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use seedenc_core::eval::{
    hit_at_k, mrr_at_k, per_query_rr, permutation_test, read_trec_run, recall_at_k, retrieve, write_metrics_csv,
    write_trec_run, MetricRow, RunResult,
};
use seedenc_core::model::ModelConfig;
use seedenc_core::pretrain::Checkpoint;
use seedenc_core::retrieval::{Metric, Qrels, RetrievalDataset, TokenizedDataset};
use seedenc_core::Error;

use super::{doc_len, load_checkpoint, load_vocab, write_csv};
use crate::config::{config_text, require_path, resolve, Invocation, RunDir};
use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateCommand {
    pub checkpoint: String,
    pub vocab: String,
    pub collection: String,
    pub queries: String,
    pub qrels: String,
    pub metric: Metric,
    /// Hits kept per query in the run file.
    pub depth: usize,
    pub max_query_len: usize,
    pub max_doc_len: usize,
    /// TREC run of another system on the same queries, for a paired test.
    pub compare: String,
    pub run_tag: String,
    pub permutation_iters: usize,
    pub seed: u64,
}

impl Default for EvaluateCommand {
    fn default() -> Self {
        EvaluateCommand {
            checkpoint: String::new(),
            vocab: String::new(),
            collection: String::new(),
            queries: String::new(),
            qrels: String::new(),
            metric: Metric::Dot,
            depth: 100,
            max_query_len: 16,
            max_doc_len: 0,
            compare: String::new(),
            run_tag: "seedenc".into(),
            permutation_iters: 10_000,
            seed: 0,
        }
    }
}

pub const MRR_K: usize = 10;

/// The standard metric set over `run`.
pub fn standard_metrics(run: &RunResult, qrels: &Qrels) -> CliResult<Vec<MetricRow>> {
    let row = |metric: &str, k: usize, value: f64| MetricRow {
        metric: metric.into(),
        k,
        value,
    };
    Ok(vec![
        row("mrr", MRR_K, mrr_at_k(run, qrels, MRR_K)?),
        row("recall", 10, recall_at_k(run, qrels, 10)?),
        row("recall", 100, recall_at_k(run, qrels, 100)?),
        row("hit", 20, hit_at_k(run, qrels, 20)?),
        row("hit", 100, hit_at_k(run, qrels, 100)?),
    ])
}

pub fn evaluate_checkpoint(
    model: &ModelConfig,
    ckpt: &Checkpoint,
    data: &TokenizedDataset,
    metric: Metric,
    depth: usize,
) -> CliResult<RunResult> {
    ckpt.validate(false)?;
    Ok(retrieve(model, &ckpt.params, data, metric, depth.max(100))?)
}

/// Paired permutation p-value of per-query RR@10 between two runs over the
/// same queries.
pub fn compare_runs(a: &RunResult, b: &RunResult, qrels: &Qrels, iters: usize, seed: u64) -> CliResult<f64> {
    fn ids(r: &RunResult) -> Vec<&str> {
        let mut v: Vec<&str> = r.queries.iter().map(|q| q.query_id.as_str()).collect();
        v.sort_unstable();
        v
    }
    if ids(a) != ids(b) {
        return Err(Error::Data("compared runs cover different query sets".into()).into());
    }
    let mut b_sorted = RunResult::default();
    for q in &a.queries {
        b_sorted.queries.push(b.get(&q.query_id).cloned().expect("same query set"));
    }
    let ra = per_query_rr(a, qrels, MRR_K)?;
    let rb = per_query_rr(&b_sorted, qrels, MRR_K)?;
    Ok(permutation_test(&ra, &rb, iters, seed)?)
}

pub fn run(inv: &Invocation) -> CliResult<()> {
    let cmd: EvaluateCommand = resolve(inv, &[])?;
    let text = config_text(&cmd)?;
    if cmd.depth == 0 {
        return Err(Error::Config("depth must be positive".into()).into());
    }
    let (ckpt, ckpt_path) = load_checkpoint("checkpoint", &cmd.checkpoint)?;
    let (vocab, vocab_path) = load_vocab(&cmd.vocab, &ckpt_path)?;
    let collection = require_path("collection", &cmd.collection)?;
    let queries = require_path("queries", &cmd.queries)?;
    let qrels = require_path("qrels", &cmd.qrels)?;
    let model = &ckpt.model;
    let data = RetrievalDataset::load(&collection, &queries, &qrels)?.tokenize(
        &vocab,
        doc_len(cmd.max_query_len, model.max_seq_len),
        doc_len(cmd.max_doc_len, model.max_seq_len),
    );
    let other = if cmd.compare.is_empty() {
        None
    } else {
        Some(read_trec_run(&PathBuf::from(&cmd.compare))?)
    };

    let run_dir = RunDir::create(inv, &text)?;
    let compare_path = PathBuf::from(&cmd.compare);
    let mut inputs = vec![ckpt_path.as_path(), vocab_path.as_path(), &collection, &queries, &qrels];
    if other.is_some() {
        inputs.push(&compare_path);
    }
    run_dir.write_manifest("evaluate", &text, Some(cmd.seed), &inputs, &[])?;

    let run = evaluate_checkpoint(model, &ckpt, &data, cmd.metric, cmd.depth)?;
    let mut kept = run.clone();
    for q in &mut kept.queries {
        q.hits.truncate(cmd.depth);
    }
    write_trec_run(&run_dir.join("run.trec"), &kept, &cmd.run_tag)?;
    let rows = standard_metrics(&run, &data.qrels)?;
    write_metrics_csv(&run_dir.join("metrics.csv"), &rows)?;
    for r in &rows {
        println!("{}@{} {:.4}", r.metric, r.k, r.value);
    }
    if let Some(other) = other {
        let p = compare_runs(&run, &other, &data.qrels, cmd.permutation_iters, cmd.seed)?;
        let a = mrr_at_k(&run, &data.qrels, MRR_K)?;
        let b = mrr_at_k(&other, &data.qrels, MRR_K)?;
        write_csv(
            &run_dir.join("compare.csv"),
            "metric,k,this,other,p_value",
            [format!("mrr,{MRR_K},{a},{b},{p}")],
        )?;
        println!("paired permutation p-value {p:.4}");
    }
    println!("{}", run_dir.path.display());
    Ok(())
}
