use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use roidet_core::pipeline::{Pipeline, PipelineConfig, Stage};
use roidet_core::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Synth,
    Extract,
    Train,
    Score,
    Classify,
    Evaluate,
    Sweep,
    Visualize,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Self {
        match c {
            Command::Synth => Stage::Synth,
            Command::Extract => Stage::Extract,
            Command::Train => Stage::Train,
            Command::Score => Stage::Score,
            Command::Classify => Stage::Classify,
            Command::Evaluate => Stage::Evaluate,
            Command::Sweep => Stage::Sweep,
            Command::Visualize => Stage::Visualize,
        }
    }
}

/// Patch-based ROI detection pipeline for melanocytic slides.
///
/// Stages read earlier artifacts from the output directory:
/// synth -> extract -> train -> score -> classify -> visualize, with
/// evaluate and sweep available once extract (and train) have run.
#[derive(Debug, Parser)]
#[command(name = "roidet", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,

    /// Pipeline config JSON; defaults apply for omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for per-slide work.
    #[arg(long, global = true, env = "ROIDET_WORKERS")]
    workers: Option<usize>,

    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

fn run(cli: &Cli) -> Result<String, Error> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    if let Some(o) = &cli.output {
        config.output = o.clone();
    }
    if cli.workers.is_some() {
        config.workers = cli.workers;
    }
    Pipeline::new(config)?.run(cli.command.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {} failed: {e}", Stage::from(cli.command).as_str());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
