use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use seedenc_core::analysis::{
    bar_chart_svg, decomposition_check, exact_conditional_entropy, generate_markov_corpus, line_plot_svg,
    train_theory_decoder, DecompositionReport, H0Mode, MarkovSpec, TheoryDecoderConfig,
};
use seedenc_core::model::DecoderSpan;

use super::write_csv;
use crate::config::{config_text, resolve, Invocation, RunDir};
use crate::error::{usage, CliResult};

/// Chain drawn by [`MarkovSpec::random`] when no spec file is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomSpec {
    pub topics: usize,
    pub vocab: usize,
    pub order: usize,
    pub support: usize,
    pub seq_len: usize,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec {
            topics: 4,
            vocab: 8,
            order: 1,
            support: 3,
            seq_len: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryCommand {
    pub spec: String,
    pub random_spec: RandomSpec,
    pub seed: u64,
    pub eval_sequences: usize,
    pub h0_modes: Vec<H0Mode>,
    pub decoders: Vec<TheoryDecoderConfig>,
}

fn decoder(name: &str, layers: usize, span: DecoderSpan) -> TheoryDecoderConfig {
    let mut d = TheoryDecoderConfig {
        name: name.into(),
        layers,
        span,
        steps: 800,
        ..TheoryDecoderConfig::default()
    };
    d.optim.total_steps = 800;
    d
}

impl Default for TheoryCommand {
    fn default() -> Self {
        TheoryCommand {
            spec: String::new(),
            random_spec: RandomSpec::default(),
            seed: 0,
            eval_sequences: 400,
            h0_modes: vec![H0Mode::True, H0Mode::Shuffled, H0Mode::Zero],
            decoders: vec![
                decoder("l1-span1", 1, DecoderSpan::Window(1)),
                decoder("l2-span2", 2, DecoderSpan::Window(2)),
                decoder("l2-spanall", 2, DecoderSpan::All),
            ],
        }
    }
}

/// Trailing mean over `w` steps.
fn smooth(xs: &[f64], w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    for (i, x) in xs.iter().enumerate() {
        acc += x;
        if i >= w {
            acc -= xs[i - w];
        }
        if (i + 1) % w.max(1) == 0 {
            out.push(((i + 1) as f64, acc / w.min(i + 1) as f64));
        }
    }
    out
}

pub fn run(inv: &Invocation) -> CliResult<()> {
    let cmd: TheoryCommand = resolve(inv, &[])?;
    let text = config_text(&cmd)?;
    if cmd.decoders.is_empty() || cmd.h0_modes.is_empty() {
        return Err(usage("verify-theory needs at least one decoder and one h0 mode"));
    }
    let spec_path = PathBuf::from(&cmd.spec);
    let spec = if cmd.spec.is_empty() {
        let r = &cmd.random_spec;
        MarkovSpec::random(r.topics, r.vocab, r.order, r.support, r.seq_len, cmd.seed)
    } else {
        MarkovSpec::load(&spec_path)?
    };
    spec.validate()?;
    let floor = exact_conditional_entropy(&spec)?;
    let eval = generate_markov_corpus(&spec, cmd.eval_sequences, cmd.seed.wrapping_add(1_000_003))?;

    let run = RunDir::create(inv, &text)?;
    let inputs: Vec<&std::path::Path> = if cmd.spec.is_empty() { vec![] } else { vec![&spec_path] };
    run.write_manifest(
        "verify-theory",
        &text,
        Some(cmd.seed),
        &inputs,
        &[("entropy_nats", floor.nats.to_string()), ("ergodic", floor.ergodic.to_string())],
    )?;
    spec.save(&run.join("spec.toml"))?;

    let mut reports: Vec<DecompositionReport> = Vec::new();
    let mut curves = Vec::new();
    for dc in &cmd.decoders {
        let dec = train_theory_decoder(&spec, dc)?;
        curves.push((dc.name.clone(), smooth(&dec.losses, 50)));
        for &mode in &cmd.h0_modes {
            let r = decomposition_check(&dec, &dc.name, &spec, &eval, mode, cmd.seed)?;
            println!(
                "{} h0={} loss {:.4} entropy {:.4} kl {:.4} (se {:.4})",
                r.config, r.h0, r.expected_loss, r.entropy, r.implied_kl, r.standard_error
            );
            reports.push(r);
        }
    }
    write_csv(&run.join("report.csv"), DecompositionReport::CSV_HEADER, reports.iter().map(|r| r.csv_row()))?;
    let mut entropy_line = curves
        .first()
        .map(|c: &(String, Vec<(f64, f64)>)| c.1.iter().map(|&(x, _)| (x, floor.nats)).collect::<Vec<_>>())
        .unwrap_or_default();
    entropy_line.dedup();
    curves.push(("entropy floor".into(), entropy_line));
    std::fs::write(
        run.join("training.svg"),
        line_plot_svg("Decoder training loss", "step", "loss (nats)", &curves),
    )?;
    let bars: Vec<(String, f64)> = reports
        .iter()
        .map(|r| (format!("{} {}", r.config, r.h0), r.implied_kl))
        .collect();
    std::fs::write(run.join("kl.svg"), bar_chart_svg("Loss above the entropy floor", "nats", &bars))?;
    println!("{}", run.path.display());
    Ok(())
}
