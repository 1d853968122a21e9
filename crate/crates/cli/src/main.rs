//! `cact`: synthetic data, extractor pretraining, context-model training,
//! sliding-window grading and rank-sum reports, all driven by one TOML file.

mod commands;
mod failure;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use cact::config::RunConfig;
use clap::{Parser, Subcommand};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "cact", version, about = "Context-aware CNN grading pipeline")]
struct Cli {
    /// Run configuration (TOML). Every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` and `data.synthetic.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir`, the parent of the run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `workers` (parallel folds).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Render the synthetic dataset into `data.root`.
    Generate,
    /// Pretrain the patch extractor on labelled patches of the train split.
    Pretrain,
    /// Train the context model (or run k-fold cross-validation).
    Train,
    /// Grade every image of a split with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rank-sum report over history, prediction or fold-table CSVs.
    Report {
        /// Overrides `report.inputs`.
        inputs: Vec<PathBuf>,
    },
    /// Run the itemized dataset checks.
    DatasetValidate,
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::Generate => "generate",
            Verb::Pretrain => "pretrain",
            Verb::Train => "train",
            Verb::Infer { .. } => "infer",
            Verb::Report { .. } => "report",
            Verb::DatasetValidate => "dataset-validate",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::config)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.data.synthetic.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    let run = rundir::RunDir::create(&cfg, cli.verb.name())?;
    log::info!("run directory {}", run.path.display());
    let outcome = match cli.verb {
        Verb::Generate => commands::generate(&cfg, &run),
        Verb::Pretrain => commands::pretrain(&cfg, &run),
        Verb::Train => commands::train(&cfg, &run),
        Verb::Infer { checkpoint } => commands::infer(&cfg, &run, &checkpoint),
        Verb::Report { inputs } => commands::report(&cfg, &run, &inputs),
        Verb::DatasetValidate => commands::dataset_validate(&cfg, &run),
    };
    if let Err(f) = &outcome {
        run.record_failure(f);
    }
    outcome
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code)
        }
    }
}
