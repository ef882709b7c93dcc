//! `optimize --config <path> [--mode simulate|run] [--out <dir>] [--seed <u64>]`

use std::path::PathBuf;
use std::process::ExitCode;

use asqn::config::{load_config, Mode};
use asqn::experiment::run_experiment;
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Simulate,
    Run,
}

/// Run an as-L-BFGS experiment described by a JSON config.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Experiment configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the configured mode
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the base seed
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match load_config(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(mode) = args.mode {
        cfg.mode = match mode {
            ModeArg::Simulate => Mode::Simulate,
            ModeArg::Run => Mode::Run,
        };
    }
    if let Some(out) = args.out {
        cfg.output = out;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    match run_experiment(&cfg) {
        Ok(outcome) => {
            for line in &outcome.report_lines {
                println!("{line}");
            }
            println!("wrote {} traces and {}", outcome.files.len(), outcome.summary_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
