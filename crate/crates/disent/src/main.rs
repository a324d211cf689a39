//! Command-line front end. Set `DISENT_LOG=info` (or `debug`) for progress
//! output on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use disent::cli::{self, TraverseMode};
use disent::metrics::{DEFAULT_FVM_SAMPLES_PER_VOTE, DEFAULT_FVM_VOTES, DEFAULT_MIG_BINS};

#[derive(Parser)]
#[command(name = "disent", version, about = "beta-VAE and ID-GAN lab on a procedural sprite lattice")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a factor lattice to a dataset cache file
    GenData {
        /// Lattice spec file (key=value); defaults to the full lattice
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a beta-VAE from a config file
    TrainVae {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train an ID-GAN against a frozen VAE checkpoint
    TrainIdgan {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint of the trained VAE whose encoder supervises the GAN
        #[arg(long)]
        vae_checkpoint: PathBuf,
    },
    /// Render a latent traversal grid from a checkpoint
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which network sweeps the codes
        #[arg(long, value_enum, default_value_t = Mode::Decoder)]
        mode: Mode,
        /// Code sweep per dimension: lo..hi (inclusive) or lo..<hi (exclusive)
        #[arg(long, default_value = "-2..2", allow_hyphen_values = true)]
        range: String,
        /// Spacing between swept code values
        #[arg(long, default_value_t = 1.0)]
        step: f32,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Seed for the fixed generator noise vector
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a VAE checkpoint against a dataset cache
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset cache produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FVM_VOTES)]
        num_votes: usize,
        #[arg(long, default_value_t = DEFAULT_FVM_SAMPLES_PER_VOTE)]
        samples_per_vote: usize,
        #[arg(long, default_value_t = DEFAULT_MIG_BINS)]
        num_bins: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Decoder,
    Generator,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DISENT_LOG")).init();
    let args = Args::parse();
    let result = match args.command {
        Command::GenData { spec, out } => cli::cmd_gen_data(spec.as_deref(), &out),
        Command::TrainVae { config } => cli::cmd_train_vae(&config),
        Command::TrainIdgan {
            config,
            vae_checkpoint,
        } => cli::cmd_train_idgan(&config, &vae_checkpoint),
        Command::Traverse {
            checkpoint,
            mode,
            range,
            step,
            out,
            seed,
        } => cli::cmd_traverse(
            &checkpoint,
            match mode {
                Mode::Decoder => TraverseMode::Decoder,
                Mode::Generator => TraverseMode::Generator,
            },
            &range,
            step,
            &out,
            seed,
        ),
        Command::Eval {
            checkpoint,
            data,
            out,
            seed,
            num_votes,
            samples_per_vote,
            num_bins,
        } => cli::cmd_eval(
            &checkpoint,
            &data,
            &out,
            seed,
            num_votes,
            samples_per_vote,
            num_bins,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
