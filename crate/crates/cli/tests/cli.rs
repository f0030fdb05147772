use std::path::{Path, PathBuf};

use seedenc_cli::{main_with_args, EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE};

fn args(a: &[&str]) -> Vec<String> {
    a.iter().map(|s| s.to_string()).collect()
}

fn code(a: &[&str]) -> i32 {
    main_with_args(&args(a))
}

struct Fixture {
    dir: tempfile::TempDir,
}

const TINY: &[&str] = &[
    "--hidden_dim",
    "16",
    "--num_heads",
    "2",
    "--ff_dim",
    "32",
    "--num_enc_layers",
    "1",
    "--decoder_layers",
    "1",
];

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        assert_eq!(code(&["make-toy-data", "--num_topics", "4", "--out", &f.path("toy")]), 0);
        f
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).display().to_string()
    }

    fn toy(&self, file: &str) -> String {
        self.path(&format!("toy/{file}"))
    }

    fn pretrain(&self, out: &str, steps: &str, extra: &[&str]) -> i32 {
        let mut a = vec!["pretrain", "--config", &*self.toy("pretrain.toml")]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        let out = self.path(out);
        a.extend(args(&["--steps", steps, "--checkpoint_every", "0", "--out", &out]));
        a.extend(args(TINY));
        a.extend(args(extra));
        main_with_args(&a)
    }

    fn finetune(&self, ckpt: &str, out: &str, extra: &[&str]) -> i32 {
        let mut a = args(&[
            "finetune",
            "--config",
            &self.toy("finetune.toml"),
            "--checkpoint",
            &self.path(ckpt),
            "--steps",
            "10",
            "--eval_interval",
            "5",
            "--out",
            &self.path(out),
        ]);
        a.extend(args(extra));
        main_with_args(&a)
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.dir.path().join(rel)).unwrap()
    }
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&["help"]), 0);
    assert_eq!(code(&[]), EXIT_USAGE);
    assert_eq!(code(&["nonsense"]), EXIT_USAGE);
    assert_eq!(code(&["pretrain", "--seed"]), EXIT_USAGE);
    assert_eq!(code(&["pretrain", "stray"]), EXIT_USAGE);
    // missing required input
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x").display().to_string();
    assert_eq!(code(&["pretrain", "--out", &out]), EXIT_USAGE);
}

#[test]
fn unknown_and_ambiguous_keys_are_rejected() {
    let f = Fixture::new();
    let err = seedenc_cli::run(&args(&["pretrain", "--config", &f.toy("pretrain.toml"), "--bogus_key", "1"])).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_USAGE);
    assert!(err.to_string().contains("bogus_key"));
    // `lr_peak` exists under both finetune.optim and optim in an ablation config
    let err = seedenc_cli::run(&args(&["ablate", "--config", &f.toy("ablate.toml"), "--lr_peak", "1e-3"])).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_USAGE);
    assert!(err.to_string().contains("ambiguous") && err.to_string().contains("finetune.optim.lr_peak"));
    let cfg = f.path("bad.toml");
    std::fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    assert_eq!(code(&["pretrain", "--config", &cfg]), EXIT_USAGE);
    assert_eq!(f.pretrain("p", "2", &["--dropout", "1.5"]), EXIT_USAGE);
}

#[test]
fn overrides_reach_the_effective_config() {
    let f = Fixture::new();
    assert_eq!(f.pretrain("p", "3", &["--decoder_span", "all", "--model.dropout=0.0", "--lr", "2e-3"]), 0);
    let cfg: toml::Table = f.read("p/config.toml").parse().unwrap();
    assert_eq!(cfg["model"]["decoder_span"].as_str(), Some("all"));
    assert_eq!(cfg["model"]["dropout"].as_float(), Some(0.0));
    assert_eq!(cfg["model"]["hidden_dim"].as_integer(), Some(16));
    assert_eq!(cfg["optim"]["lr_peak"].as_float(), Some(2e-3));
    let manifest: toml::Table = f.read("p/manifest.toml").parse().unwrap();
    assert_eq!(manifest["command"].as_str(), Some("pretrain"));
    let inputs = manifest["inputs"].as_table().unwrap();
    assert_eq!(inputs.len(), 1);
    assert_eq!(inputs.values().next().unwrap().as_str().unwrap().len(), 64);
}

#[test]
fn default_run_directory_is_keyed_by_config_hash() {
    let f = Fixture::new();
    let root = f.path("root");
    std::env::set_var(seedenc_cli::config::OUTPUT_ROOT_ENV, &root);
    let run = |seed: &str| {
        seedenc_cli::run(&args(&["make-toy-data", "--num_topics", "4", "--seed", seed])).unwrap();
    };
    run("1");
    run("1");
    run("2");
    std::env::remove_var(seedenc_cli::config::OUTPUT_ROOT_ENV);
    let dirs: Vec<_> = std::fs::read_dir(&root).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(dirs.len(), 2);
    assert!(dirs.iter().all(|d| d.to_string_lossy().starts_with("make-toy-data-")));
}

#[test]
fn pretrain_finetune_evaluate_are_reproducible() {
    let f = Fixture::new();
    for r in ["a", "b"] {
        assert_eq!(f.pretrain(&format!("p{r}"), "8", &[]), 0);
        assert_eq!(f.finetune(&format!("p{r}"), &format!("f{r}"), &[]), 0);
        let ev = args(&["evaluate", "--config", &f.toy("evaluate.toml"), "--checkpoint", &f.path(&format!("f{r}")), "--out", &f.path(&format!("e{r}"))]);
        assert_eq!(main_with_args(&ev), 0);
    }
    for file in ["p{}/metrics.csv", "f{}/finetune_metrics.csv", "f{}/eval_log.csv", "e{}/run.trec", "e{}/metrics.csv"] {
        assert_eq!(f.read(&file.replace("{}", "a")), f.read(&file.replace("{}", "b")), "{file}");
    }
    assert_eq!(f.read("pa/metrics.csv").lines().count(), 9);
    let log = f.read("fa/eval_log.csv");
    assert_eq!(log.lines().next(), Some("step,mrr@10"));
    assert_eq!(log.lines().count(), 4);
    assert!(f.read("fa/triples.tsv").lines().all(|l| l.split('\t').count() == 3));
    let metrics = f.read("ea/metrics.csv");
    for m in ["mrr,10,", "recall,10,", "recall,100,", "hit,20,", "hit,100,"] {
        assert!(metrics.contains(m), "{m}");
    }
    // a different seed gives a different loss trace
    assert_eq!(f.pretrain("pc", "8", &["--seed", "5"]), 0);
    assert_ne!(f.read("pa/metrics.csv"), f.read("pc/metrics.csv"));
}

#[test]
fn evaluate_compare_reports_a_p_value() {
    let f = Fixture::new();
    assert_eq!(f.pretrain("p", "4", &[]), 0);
    assert_eq!(f.finetune("p", "f", &[]), 0);
    let ev = |ckpt: &str, out: &str, extra: &[&str]| {
        let mut a = args(&["evaluate", "--config", &f.toy("evaluate.toml"), "--checkpoint", &f.path(ckpt), "--out", &f.path(out)]);
        a.extend(args(extra));
        main_with_args(&a)
    };
    assert_eq!(ev("p", "e0", &[]), 0);
    assert_eq!(ev("f", "e1", &["--compare", &f.path("e0/run.trec")]), 0);
    let cmp = f.read("e1/compare.csv");
    let row: Vec<&str> = cmp.lines().nth(1).unwrap().split(',').collect();
    let p: f64 = row[4].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    // same system against itself: no difference at all
    assert_eq!(ev("f", "e2", &["--compare", &f.path("e1/run.trec")]), 0);
    let row = f.read("e2/compare.csv");
    assert!(row.lines().nth(1).unwrap().ends_with(",1"), "{row}");
    // a run over other queries cannot be paired
    let other = ev("f", "e3", &["--queries", &f.toy("train_queries.tsv"), "--qrels", &f.toy("train_qrels.tsv")]);
    assert_eq!(other, 0);
    assert_eq!(ev("f", "e4", &["--compare", &f.path("e3/run.trec")]), EXIT_DATA);
}

#[test]
fn dependency_analysis_needs_a_decoder() {
    let f = Fixture::new();
    assert_eq!(f.pretrain("p", "4", &[]), 0);
    assert_eq!(f.finetune("p", "f", &[]), 0);
    let analyze = |kind: &str, ckpt: &str, out: &str| {
        code(&[
            "analyze",
            "--analysis",
            kind,
            "--checkpoints",
            &format!("[{:?}]", f.path(ckpt)),
            "--corpus",
            &f.toy("corpus.txt"),
            "--lengths",
            "[4, 8]",
            "--pairs",
            "20",
            "--max_sequences",
            "8",
            "--out",
            &f.path(out),
        ])
    };
    assert_eq!(analyze("dependency", "f", "a1"), EXIT_DATA);
    assert_eq!(analyze("dependency", "p", "a2"), 0);
    assert!(f.read("a2/dependency.csv").starts_with("label,position,mean_cosine,sequences"));
    assert!(f.read("a2/dependency.svg").starts_with("<svg"));
    assert_eq!(analyze("diversity", "f", "a3"), 0);
    assert_eq!(f.read("a3/diversity.csv").lines().count(), 3);
    assert_eq!(analyze("bogus", "f", "a4"), EXIT_USAGE);
}

#[test]
fn ablation_records_failures_and_continues() {
    let f = Fixture::new();
    let mut a = args(&[
        "ablate",
        "--config",
        &f.toy("ablate.toml"),
        "--layers",
        "[1]",
        "--spans",
        "[2, 0]",
        "--seeds",
        "[0, 1]",
        "--pretrain_steps",
        "3",
        "--finetune_steps",
        "2",
        "--parallel",
        "2",
        "--out",
        &f.path("ab"),
    ]);
    a.extend(args(&TINY[..8]));
    assert_eq!(main_with_args(&a), 0);
    let summary = f.read("ab/summary.csv");
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let failed: Vec<_> = rows.iter().filter(|r| r[6] == "failed").collect();
    assert_eq!(failed.len(), 2);
    assert!(failed.iter().all(|r| r[2] == "0" && r[7].contains("decoder_span")));
    for r in rows.iter().filter(|r| r[6] == "ok") {
        let mrr: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&mrr));
    }
    assert!(f.read("ab/mrr.svg").starts_with("<svg"));
    assert!(f.read("ab/recall.svg").starts_with("<svg"));
    assert!(Path::new(&f.path("ab/cells/mlm-s1/encoder.ckpt")).is_file());
}

#[test]
fn verify_theory_writes_a_report() {
    let f = Fixture::new();
    let out = f.path("th");
    let status = code(&[
        "verify-theory",
        "--spec",
        &f.toy("markov_topics.toml"),
        "--decoders",
        "[{name = \"d\", layers = 1, span = 2, steps = 30}]",
        "--eval_sequences",
        "60",
        "--out",
        &out,
    ]);
    assert_eq!(status, 0);
    let report = f.read("th/report.csv");
    assert_eq!(report.lines().count(), 4);
    assert!(report.lines().nth(1).unwrap().starts_with("d,true,"));
    for svg in ["training.svg", "kl.svg"] {
        assert!(PathBuf::from(&out).join(svg).is_file());
    }
    // too few evaluation positions
    let status = code(&["verify-theory", "--decoders", "[{steps = 2}]", "--eval_sequences", "5", "--out", &f.path("th2")]);
    assert_eq!(status, EXIT_DATA);
}

#[test]
fn divergent_training_exits_with_numerical_code() {
    let f = Fixture::new();
    let status = f.pretrain("p", "40", &["--lr", "1e30", "--clip_norm", "1e30", "--warmup_steps", "0"]);
    assert_eq!(status, EXIT_NUMERICAL);
}
