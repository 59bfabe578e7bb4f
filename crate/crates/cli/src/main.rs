//! `headpool` command-line tool.
//!
//! Exit codes: 0 ok, 2 usage or config error, 3 training failure,
//! 4 missing or failed prerequisite, 5 incompatible checkpoints.

mod commands;
mod config;
mod exit;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use headpool::data::DatasetKind;

use commands::{EvalArgs, SampleArgs};
use exit::CliError;
use manifest::RUNS_ROOT_ENV;

#[derive(Parser)]
#[command(name = "headpool", version, about = "One-step diffusion distillation against a dynamic discriminator-head pool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a multi-step teacher and record its quality gate.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = RUNS_ROOT_ENV, default_value = "runs")]
        runs_root: PathBuf,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Distill the configured teacher, bottom-up through stages 1..=STAGE.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=4))]
        stage: u8,
        #[arg(long, env = RUNS_ROOT_ENV, default_value = "runs")]
        runs_root: PathBuf,
        /// Teacher checkpoint directory (overrides teacher.checkpoint).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint with 1 to 4 steps.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        steps: u8,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Class label for every sample (default: labels cycle through all classes).
        #[arg(long)]
        cond: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint at several step counts and write report and plots.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset name (default: the one recorded in the checkpoint).
        #[arg(long)]
        data: Option<DatasetKind>,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true, value_parser = clap::value_parser!(u8).range(1..=4))]
        steps: Vec<u8>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        projections: usize,
        #[arg(long, default_value = "eval")]
        run_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = RUNS_ROOT_ENV, default_value = "runs")]
        runs_root: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Write custom + (tuned - base) as a new checkpoint.
    Adapt {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        #[arg(long)]
        custom: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainTeacher { config, runs_root, force } => {
            println!("{}", commands::cmd_train_teacher(&config, &runs_root, force)?.display());
        }
        Command::Distill { config, stage, runs_root, teacher } => {
            println!("{}", commands::cmd_distill(&config, stage as usize, &runs_root, teacher.as_deref())?.display());
        }
        Command::Sample { checkpoint, steps, n, cond, seed, out } => {
            commands::cmd_sample(SampleArgs { checkpoint: &checkpoint, steps: steps as usize, n, cond, seed, out: &out })?;
            println!("{}", out.display());
        }
        Command::Eval { checkpoint, data, steps, teacher, n, seed, projections, run_id, out } => {
            let paths = commands::cmd_eval(EvalArgs {
                checkpoint: &checkpoint,
                data,
                steps: steps.into_iter().map(usize::from).collect(),
                teacher: teacher.as_deref(),
                n,
                seed,
                projections,
                run_id: &run_id,
                out: &out,
            })?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Ablate { config, runs_root, teacher, force } => {
            println!("{}", commands::cmd_ablate(&config, &runs_root, teacher.as_deref(), force)?.display());
        }
        Command::Adapt { base, tuned, custom, out } => {
            println!("{}", commands::cmd_adapt(&base, &tuned, &custom, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
