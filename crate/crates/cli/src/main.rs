//! `fpdenoise`: dataset generation, training, evaluation, denoising and
//! gradient verification.
//!
//! Exit status: 0 ok, 2 usage, 3 I/O, 4 numeric abort, 5 checkpoint
//! mismatch, 6 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fpdenoise::data::Split;

use commands::{DenoiseArgs, EvalArgs, GenerateArgs, TrainArgs};

const AFTER_HELP: &str = "\
Exit status: 0 ok, 2 usage, 3 I/O, 4 numeric abort, 5 checkpoint mismatch, 6 verification failure.
Config files hold `key = value` lines; run `fpdenoise config` to list every key with its default.";

#[derive(Parser)]
#[command(name = "fpdenoise", version, about = "Fingerprint image denoising", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clean/noisy dataset and report its noisy baseline.
    Generate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs [default: 100, or data.count].
        #[arg(long)]
        count: Option<usize>,
        /// Image size as HxW, multiples of 8 [default: 64x64, or data.size].
        #[arg(long)]
        size: Option<String>,
        /// Generator seed [default: 0, or data.seed].
        #[arg(long)]
        seed: Option<u64>,
        /// Degradations as `op:param@probability,...`, or `none` [default: the built-in recipe, or data.recipe].
        #[arg(long)]
        recipe: Option<String>,
        /// Run configuration file [default: none].
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overwrite an existing dataset [default: false].
        #[arg(long)]
        force: bool,
    },
    /// Train on the train split, early-stopping on the val split.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path for the best model.
        #[arg(long)]
        out: PathBuf,
        /// Run configuration file [default: none].
        #[arg(long)]
        config: Option<PathBuf>,
        /// Epoch limit [default: 30, or train.max_epochs].
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Training seed [default: 0, or train.seed].
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch CSV log [default: the checkpoint path with a .csv extension].
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the state stored in --out [default: false].
        #[arg(long)]
        resume: bool,
        /// Overwrite an existing checkpoint [default: false].
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on one split against the noisy baseline.
    Eval {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long, required_unless_present = "identity")]
        ckpt: Option<PathBuf>,
        /// Split to score: train, val or test.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Per-image CSV [default: <ckpt>.<split>.csv].
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Run configuration; when given, the checkpoint must match its model keys [default: none].
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score the identity map instead of a checkpoint [default: false].
        #[arg(long)]
        identity: bool,
    },
    /// Denoise one PGM image; sizes that are not multiples of 8 are
    /// reflect-padded and cropped back.
    Denoise {
        /// Checkpoint to apply.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input PGM.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PGM, 8-bit.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every tensor op and of a toy network.
    Gradcheck {
        /// Seed for the random test inputs.
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Parameter entries sampled in the end-to-end check.
        #[arg(long, default_value_t = 24)]
        samples: usize,
    },
    /// Print every configuration key with its default value.
    Config,
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    match cli.command {
        Command::Generate {
            out,
            count,
            size,
            seed,
            recipe,
            config,
            force,
        } => commands::generate(GenerateArgs {
            out,
            count,
            size,
            seed,
            recipe,
            config,
            force,
        }),
        Command::Train {
            data,
            out,
            config,
            max_epochs,
            seed,
            log,
            resume,
            force,
        } => commands::train(TrainArgs {
            data,
            out,
            config,
            max_epochs,
            seed,
            log,
            resume,
            force,
        }),
        Command::Eval {
            data,
            ckpt,
            split,
            csv,
            config,
            identity,
        } => commands::eval(EvalArgs {
            data,
            ckpt,
            split,
            csv,
            config,
            identity,
        }),
        Command::Denoise { ckpt, input, out } => commands::denoise(DenoiseArgs { ckpt, input, out }),
        Command::Gradcheck { seed, samples } => commands::gradcheck(seed, samples),
        Command::Config => {
            print!("{}", config::RunConfig::default().echo());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
