//! Command-line surface: dataset generation, training, simulation,
//! evaluation and a fast self-check.
//!
//! Exit codes: 0 success, 1 input/configuration error, 2 simulation
//! divergence, 3 invariant failure.

use clap::{Parser, Subcommand};
use mcfluid_core::config::RunConfig;
use mcfluid_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

#[derive(Parser)]
#[command(
    name = "mcfluid",
    version,
    about = "Momentum-conserving learned particle dynamics"
)]
struct Cli {
    /// Print every configuration key with its default value and exit.
    #[arg(long)]
    dump_defaults: bool,

    /// Worker threads for internal parallelism. Results are bit-identical
    /// for any value; reductions always run in a fixed order.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Force fixed reduction orders. Reductions are already fixed-order by
    /// construction; the flag additionally pins --threads to 1.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate reference trajectories into an output directory.
    GenData {
        /// Run configuration file (key = value).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for trajectory files and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on generated trajectories.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory of trajectory files (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll a trained model forward from an initial frame.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trajectory file providing the initial state.
        #[arg(long)]
        frame: PathBuf,
        /// Frame index within the trajectory to start from.
        #[arg(long, default_value_t = 0)]
        frame_index: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Keep this fraction of fluid particles and compensate the
        /// kernels by the inverse factor.
        #[arg(long, default_value_t = 1.0)]
        sampling_ratio: f64,
    },
    /// Compare a predicted trajectory against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Output directory for the per-frame CSV and the summary.
        #[arg(long)]
        out: PathBuf,
        /// Perturb predicted positions before computing metrics
        /// (standard deviation = ratio * particle radius).
        #[arg(long, default_value_t = 0.0)]
        noise_ratio: f64,
        /// Subsample the target with the same stride pattern as a
        /// sampling-ratio simulation so particle counts match.
        #[arg(long, default_value_t = 1.0)]
        sampling_ratio: f64,
        /// Speed-histogram bins.
        #[arg(long, default_value_t = 64)]
        bins: usize,
        /// Seed for the evaluation noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the fast invariant suite (momentum, antisymmetry, gradients,
    /// assignment oracle).
    Check {
        /// Deliberately corrupt the mirror construction; the check must
        /// then fail (used to validate the failure path).
        #[arg(long, hide = true)]
        corrupt_mirror: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } => 2,
        Error::Invariant(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.dump_defaults {
        print!("{}", RunConfig::default().dump());
        return ExitCode::SUCCESS;
    }
    let threads = if cli.deterministic { 1 } else { cli.threads.max(1) };
    let Some(command) = cli.command else {
        eprintln!("error: no command given (try --help)");
        return ExitCode::from(1);
    };
    let result = match command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Train { config, data, out } => commands::train(&config, &data, &out, threads),
        Command::Simulate {
            checkpoint,
            frame,
            frame_index,
            steps,
            out,
            sampling_ratio,
        } => commands::simulate(&checkpoint, &frame, frame_index, steps, &out, sampling_ratio),
        Command::Eval {
            pred,
            target,
            out,
            noise_ratio,
            sampling_ratio,
            bins,
            seed,
        } => commands::eval(&pred, &target, &out, noise_ratio, sampling_ratio, bins, seed),
        Command::Check { corrupt_mirror } => commands::check(corrupt_mirror),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
