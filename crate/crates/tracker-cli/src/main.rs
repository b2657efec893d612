//! `tracker` command line: train and finetune controllers, evaluate
//! checkpoints, and generate the supporting artifacts.
//!
//! Every command prints exactly one JSON summary line to stdout on success;
//! failures print one JSON error line to stderr and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tracker_core::orch::verbs;
use tracker_core::orch::{run_finetune, run_training, Config, OrchError};

#[derive(Parser)]
#[command(
    name = "tracker",
    version,
    about = "World-model tracking control for an antagonistic pneumatic joint"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a controller from scratch and write a checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint over the fixed evaluation suite.
    Evaluate(CheckpointArgs),
    /// Compare a checkpoint against the PID baseline on the suite.
    ComparePid(CheckpointArgs),
    /// Adapt a checkpoint to a perturbed plant on a quarter budget.
    Finetune(FinetuneArgs),
    /// Imagine an episode blind and replay its actions on the real plant.
    RolloutWorldmodel(CheckpointArgs),
    /// Write the evaluation trajectory suite as CSV files.
    GenTrajectories(BareArgs),
    /// Tune the PID baseline and write the gains.
    TunePid(BareArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; fixes every random draw of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory artifacts are written into.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run strictly serially: two runs with the same config and seed
    /// produce bit-identical artifacts.
    #[arg(long)]
    sync: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to load.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to start from.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Relative perturbation applied to the plant's muscle parameters.
    #[arg(long, value_name = "FRAC", default_value_t = 0.1)]
    perturb: f32,
    /// Run strictly serially (see `train --sync`).
    #[arg(long)]
    sync: bool,
}

#[derive(Args)]
struct BareArgs {
    #[command(flatten)]
    common: CommonArgs,
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, OrchError> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Serializes a verb summary with the command name folded in.
fn tag_summary<T: serde::Serialize>(command: &str, summary: &T) -> String {
    let mut v = serde_json::to_value(summary).expect("summary serializes");
    v.as_object_mut()
        .expect("summary is a JSON object")
        .insert("command".into(), json!(command));
    v.to_string()
}

fn run(cli: Cli) -> Result<String, OrchError> {
    Ok(match cli.command {
        Command::Train(a) => {
            let cfg = load_config(&a.common.config)?;
            let outcome = run_training(&cfg, a.common.seed, a.sync, &a.common.out)?;
            json!({
                "command": "train",
                "episodes_run": outcome.episodes_run,
                "stopped_early": outcome.stopped_early,
                "final_mean_mse": outcome.eval_history.last(),
                "out": a.common.out,
            })
            .to_string()
        }
        Command::Evaluate(a) => {
            let cfg = load_config(&a.common.config)?;
            let s = verbs::verb_evaluate(&cfg, a.common.seed, &a.checkpoint, &a.common.out)?;
            tag_summary("evaluate", &s)
        }
        Command::ComparePid(a) => {
            let cfg = load_config(&a.common.config)?;
            let s = verbs::verb_compare_pid(&cfg, a.common.seed, &a.checkpoint, &a.common.out)?;
            tag_summary("compare-pid", &s)
        }
        Command::Finetune(a) => {
            let cfg = load_config(&a.common.config)?;
            let outcome = run_finetune(
                &cfg,
                a.common.seed,
                a.sync,
                &a.checkpoint,
                a.perturb,
                &a.common.out,
            )?;
            json!({
                "command": "finetune",
                "episodes_run": outcome.episodes_run,
                "pre_perturb_mse": outcome.pre_perturb_mse,
                "post_perturb_mse": outcome.post_perturb_mse,
                "post_finetune_mse": outcome.post_finetune_mse,
                "out": a.common.out,
            })
            .to_string()
        }
        Command::RolloutWorldmodel(a) => {
            let cfg = load_config(&a.common.config)?;
            let s = verbs::verb_rollout(&cfg, a.common.seed, &a.checkpoint, &a.common.out)?;
            tag_summary("rollout-worldmodel", &s)
        }
        Command::GenTrajectories(a) => {
            let cfg = load_config(&a.common.config)?;
            let s = verbs::verb_gen_trajectories(&cfg, a.common.seed, &a.common.out)?;
            tag_summary("gen-trajectories", &s)
        }
        Command::TunePid(a) => {
            let cfg = load_config(&a.common.config)?;
            let s = verbs::verb_tune_pid(&cfg, a.common.seed, &a.common.out)?;
            tag_summary("tune-pid", &s)
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({ "error": e.to_string() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
