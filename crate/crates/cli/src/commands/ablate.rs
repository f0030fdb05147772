use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use seedenc_core::analysis::bar_chart_svg;
use seedenc_core::eval::{mrr_at_k, recall_at_k, write_metrics_csv};
use seedenc_core::model::{DecoderSpan, ModelConfig};
use seedenc_core::pretrain::{pretrain, OptimConfig};
use seedenc_core::retrieval::{eval_header, finetune, FinetuneConfig, FINETUNE_HEADER};
use seedenc_core::text::{read_corpus, MaskingConfig, TokenSequence};

use super::evaluate::{evaluate_checkpoint, standard_metrics, MRR_K};
use super::finetune::{encoder_checkpoint, load_splits, FinetuneData, Splits};
use super::pretrain::{corpus_vocab, tokenize_corpus, PretrainCommand, PretrainData, TrainSection};
use super::{write_csv, ENCODER_CHECKPOINT, VOCAB_FILE};
use crate::config::{config_text, require_path, resolve, Invocation, RunDir};
use crate::error::{usage, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateData {
    pub corpus: String,
    pub min_freq: usize,
    pub collection: String,
    pub queries: String,
    pub qrels: String,
    pub dev_queries: String,
    pub dev_qrels: String,
    pub max_query_len: usize,
    pub max_doc_len: usize,
}

impl Default for AblateData {
    fn default() -> Self {
        AblateData {
            corpus: String::new(),
            min_freq: 1,
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub layers: Vec<usize>,
    pub spans: Vec<DecoderSpan>,
    pub seeds: Vec<u64>,
    /// Adds a decoder-free masked-LM run per seed.
    pub mlm_baseline: bool,
    /// Cells run concurrently.
    pub parallel: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            layers: vec![1, 3, 5],
            spans: vec![DecoderSpan::Window(2), DecoderSpan::All],
            seeds: vec![0],
            mlm_baseline: true,
            parallel: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblateCommand {
    pub data: AblateData,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub masking: MaskingConfig,
    pub train: TrainSection,
    pub finetune: FinetuneConfig,
    pub grid: Grid,
}

pub const ALIASES: &[(&str, &str)] = &[
    ("layers", "grid.layers"),
    ("spans", "grid.spans"),
    ("seeds", "grid.seeds"),
    ("parallel", "grid.parallel"),
    ("pretrain_steps", "train.steps"),
    ("finetune_steps", "finetune.steps"),
];

#[derive(Clone, Debug, PartialEq)]
struct Cell {
    label: String,
    layers: Option<usize>,
    span: Option<DecoderSpan>,
    seed: u64,
}

impl Cell {
    fn dir_name(&self) -> String {
        format!("{}-s{}", self.label, self.seed)
    }
}

fn cells(grid: &Grid) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in &grid.seeds {
        if grid.mlm_baseline {
            out.push(Cell {
                label: "mlm".into(),
                layers: None,
                span: None,
                seed,
            });
        }
        for &layers in &grid.layers {
            for &span in &grid.spans {
                out.push(Cell {
                    label: format!("seed-l{layers}-k{span}"),
                    layers: Some(layers),
                    span: Some(span),
                    seed,
                });
            }
        }
    }
    out
}

struct Shared<'a> {
    cmd: &'a AblateCommand,
    corpus: Vec<TokenSequence>,
    vocab_size: usize,
    splits: Splits,
}

/// Dev MRR@10 and Recall@100 of one pretrain / fine-tune / evaluate chain.
fn run_cell(shared: &Shared, cell: &Cell, dir: &Path) -> CliResult<(f64, f64)> {
    let cmd = shared.cmd;
    let mut pre = PretrainCommand {
        data: PretrainData::default(),
        model: cmd.model.clone(),
        optim: cmd.optim.clone(),
        masking: cmd.masking.clone(),
        train: TrainSection {
            seed: cell.seed,
            ..cmd.train.clone()
        },
    };
    match (cell.layers, cell.span) {
        (Some(l), Some(k)) => {
            pre.model.num_dec_layers = l;
            pre.model.decoder_span = k;
        }
        _ => pre.train.decoder_weight = 0.0,
    }
    let cfg = pre.core_config(shared.vocab_size);
    std::fs::create_dir_all(dir)?;
    let pt = pretrain(&shared.corpus, &cfg, Some(dir), None)?;
    let ft = FinetuneConfig {
        seed: cell.seed,
        ..cmd.finetune.clone()
    };
    let dev = shared.splits.dev.as_ref();
    let out = finetune(&cfg.model, &pt.params, &shared.splits.train, dev, &ft)?;
    write_csv(&dir.join("finetune_metrics.csv"), FINETUNE_HEADER, out.log.iter().map(|r| r.csv_row()))?;
    write_csv(&dir.join("eval_log.csv"), &eval_header(ft.eval_k), out.eval_log.iter().map(|r| r.csv_row()))?;
    let ckpt = encoder_checkpoint(&cfg.model, &ft, &out)?;
    ckpt.save(&dir.join(ENCODER_CHECKPOINT))?;
    let dev = dev.expect("ablate requires a dev split");
    let run = evaluate_checkpoint(&cfg.model, &ckpt, dev, ft.metric, 100)?;
    write_metrics_csv(&dir.join("metrics.csv"), &standard_metrics(&run, &dev.qrels)?)?;
    Ok((mrr_at_k(&run, &dev.qrels, MRR_K)?, recall_at_k(&run, &dev.qrels, 100)?))
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

pub fn run(inv: &Invocation) -> CliResult<()> {
    let cmd: AblateCommand = resolve(inv, ALIASES)?;
    let text = config_text(&cmd)?;
    if cmd.grid.seeds.is_empty() || (cmd.grid.layers.is_empty() || cmd.grid.spans.is_empty()) && !cmd.grid.mlm_baseline {
        return Err(usage("ablation grid is empty"));
    }
    if cmd.data.dev_queries.is_empty() || cmd.data.dev_qrels.is_empty() {
        return Err(usage("ablate needs data.dev_queries and data.dev_qrels"));
    }
    let corpus_path = require_path("data.corpus", &cmd.data.corpus)?;
    let docs = read_corpus(&corpus_path)?;
    let vocab = corpus_vocab(&docs, "", cmd.model.vocab_size, cmd.data.min_freq)?;
    let split_data = FinetuneData {
        checkpoint: String::new(),
        vocab: String::new(),
        collection: cmd.data.collection.clone(),
        queries: cmd.data.queries.clone(),
        qrels: cmd.data.qrels.clone(),
        dev_queries: cmd.data.dev_queries.clone(),
        dev_qrels: cmd.data.dev_qrels.clone(),
        max_query_len: cmd.data.max_query_len,
        max_doc_len: cmd.data.max_doc_len,
    };
    let splits = load_splits(&split_data, &vocab, &cmd.model)?;
    let shared = Shared {
        cmd: &cmd,
        corpus: tokenize_corpus(&docs, &vocab, cmd.model.max_seq_len),
        vocab_size: vocab.len(),
        splits,
    };

    let run = RunDir::create(inv, &text)?;
    vocab.write(&run.join(VOCAB_FILE))?;
    let mut inputs = vec![corpus_path.as_path()];
    inputs.extend(shared.splits.inputs.iter().map(PathBuf::as_path));
    run.write_manifest("ablate", &text, None, &inputs, &[("vocab_size", vocab.len().to_string())])?;

    let cells = cells(&cmd.grid);
    let results: Mutex<Vec<Option<CliResult<(f64, f64)>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(i) else { break };
        log::info!("ablate: cell {} of {}: {}", i + 1, cells.len(), cell.dir_name());
        let r = run_cell(&shared, cell, &run.join("cells").join(cell.dir_name()));
        if let Err(e) = &r {
            log::warn!("ablate: {} failed: {e}", cell.dir_name());
        }
        results.lock().expect("results lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..cmd.grid.parallel.clamp(1, cells.len()) {
            s.spawn(work);
        }
    });
    let results: Vec<CliResult<(f64, f64)>> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();

    let mut rows = Vec::new();
    for (cell, r) in cells.iter().zip(&results) {
        let layers = cell.layers.map_or("-".to_string(), |l| l.to_string());
        let span = cell.span.map_or("-".to_string(), |k| k.to_string());
        let fields = match r {
            Ok((mrr, recall)) => format!("{mrr},{recall},ok,"),
            Err(e) => format!(",,failed,{}", csv_field(&e.to_string())),
        };
        rows.push(format!("{},{layers},{span},{},{fields}", cell.label, cell.seed));
    }
    write_csv(&run.join("summary.csv"), "label,layers,span,seed,mrr@10,recall@100,status,error", rows)?;

    for (idx, (name, file)) in [("MRR@10", "mrr.svg"), ("Recall@100", "recall.svg")].into_iter().enumerate() {
        let mut bars: Vec<(String, f64)> = Vec::new();
        let mut labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        labels.dedup();
        labels.sort_unstable();
        labels.dedup();
        for label in labels {
            let vals: Vec<f64> = cells
                .iter()
                .zip(&results)
                .filter(|(c, _)| c.label == label)
                .filter_map(|(_, r)| r.as_ref().ok().map(|v| if idx == 0 { v.0 } else { v.1 }))
                .collect();
            if !vals.is_empty() {
                bars.push((label.to_string(), vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        std::fs::write(run.join(file), bar_chart_svg(&format!("Dev {name} by configuration"), name, &bars))?;
    }
    let failed = results.iter().filter(|r| r.is_err()).count();
    println!("{} cells, {failed} failed", cells.len());
    println!("{}", run.path.display());
    Ok(())
}
