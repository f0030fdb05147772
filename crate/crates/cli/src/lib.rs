//! `seedenc` command-line driver.
//!
//! Every subcommand takes `--config file.toml`, `--out dir` and any number of
//! `--key value` overrides. Keys may be full dotted paths, a command alias,
//! or an unambiguous leaf name.

mod commands;
pub mod config;
mod error;

pub use error::{CliError, CliResult, EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE};

pub const HELP: &str = "\
usage: seedenc <command> [--config FILE] [--out DIR] [--key value ...]

commands:
  pretrain        masked-LM plus weak-decoder pretraining
  finetune        dense-retrieval fine-tuning of a pretrained encoder
  evaluate        exact retrieval, TREC run file and metrics
  analyze         CLS diversity or decoder dependency probes
  ablate          pretrain, fine-tune and evaluate over a decoder grid
  verify-theory   decoders on Markov sources against the entropy floor
  make-toy-data   write a synthetic corpus, retrieval splits and configs

exit codes: 0 ok, 2 usage or config, 3 data, 4 numerical";

/// Runs one invocation and returns the process exit code.
pub fn main_with_args(args: &[String]) -> i32 {
    if args.is_empty() || matches!(args[0].as_str(), "help" | "--help" | "-h") {
        println!("{HELP}");
        return if args.is_empty() { EXIT_USAGE } else { 0 };
    }
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("seedenc: {e}");
            e.exit_code()
        }
    }
}

/// Like [`main_with_args`] but returns the error.
pub fn run(args: &[String]) -> CliResult<()> {
    let inv = config::parse_invocation(args)?;
    commands::dispatch(&inv)
}
