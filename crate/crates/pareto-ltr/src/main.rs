use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pareto_ltr::cli::{
    cmd_ablate, cmd_coverage, cmd_eval, cmd_simulate, cmd_solver, cmd_sweep_l, cmd_train,
    ExperimentConfig,
};
use pareto_ltr::Error;

/// Multi-objective learning-to-rank experiments: adaptive Pareto
/// weighting of a ranking-consistency loss against a forgetting-curve
/// negative-feedback penalty.
#[derive(Parser)]
#[command(name = "pareto-ltr", version)]
struct Args {
    /// Experiment config JSON (required by every command except solver).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed override (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write its interaction log.
    Simulate,
    /// Train the pre-ranking model; write checkpoints, curve, summary.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Parameter checkpoint JSON produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fixed-weight ablation sweep plus one adaptive run.
    Ablate,
    /// Retention (one-day memory rate) sweep.
    SweepL,
    /// General vs personalized feedback coverage rates.
    Coverage,
    /// Run the min-norm solver on a Gram matrix from a JSON file.
    Solver {
        /// JSON file holding the matrix (bare rows or `{"m": rows}`).
        #[arg(long)]
        matrix: PathBuf,
    },
}

fn run(args: Args) -> Result<(), Error> {
    let load = || -> Result<ExperimentConfig, Error> {
        let path = args
            .config
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("this command needs --config <path>".into()))?;
        ExperimentConfig::load(path, args.seed)
    };
    let out_of = |cfg: &ExperimentConfig| -> Result<PathBuf, Error> {
        args.out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .ok_or_else(|| {
                Error::InvalidInput("no output directory: pass --out or set out_dir".into())
            })
    };

    match &args.command {
        Command::Simulate => {
            let cfg = load()?;
            cmd_simulate(&cfg, &out_of(&cfg)?)
        }
        Command::Train => {
            let cfg = load()?;
            cmd_train(&cfg, &out_of(&cfg)?)
        }
        Command::Eval { checkpoint } => {
            let cfg = load()?;
            cmd_eval(&cfg, &out_of(&cfg)?, checkpoint)
        }
        Command::Ablate => {
            let cfg = load()?;
            cmd_ablate(&cfg, &out_of(&cfg)?)
        }
        Command::SweepL => {
            let cfg = load()?;
            cmd_sweep_l(&cfg, &out_of(&cfg)?)
        }
        Command::Coverage => {
            let cfg = load()?;
            cmd_coverage(&cfg, &out_of(&cfg)?)
        }
        Command::Solver { matrix } => {
            let cfg = match &args.config {
                Some(path) => Some(ExperimentConfig::load(path, args.seed)?),
                None => None,
            };
            cmd_solver(cfg.as_ref(), matrix, args.out.as_deref()).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
            );
            ExitCode::FAILURE
        }
    }
}
