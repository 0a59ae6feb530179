//! `lantern`: generate phantom datasets, train, reconstruct and evaluate.

mod commands;
mod config;
mod datadir;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lantern", version, about = "Unrolled-ADMM analysis-transform network for dynamic MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize dynamic phantoms and their undersampled k-space.
    GenData(GenDataArgs),
    /// Train a network on a generated dataset.
    Train(TrainArgs),
    /// Reconstruct images from k-space with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Compare reconstructions to ground truth and write a metrics CSV.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file supplying any of the options below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of samples [default: 20]
    #[arg(long)]
    pub n: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub nx: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub ny: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub nt: Option<usize>,
    /// 1drandom, radial or full [default: 1drandom]
    #[arg(long)]
    pub mask: Option<String>,
    /// Acceleration factor, at least 1 [default: 4]
    #[arg(long)]
    pub accel: Option<f64>,
    /// Always-sampled central lines of Cartesian masks [default: 4]
    #[arg(long)]
    pub center_lines: Option<usize>,
    /// Standard deviation of complex k-space noise [default: 0]
    #[arg(long)]
    pub noise: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ellipses per phantom [default: 4]
    #[arg(long)]
    pub ellipses: Option<usize>,
    /// Peak relative radius change of moving ellipses [default: 0.2]
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Background texture strength [default: 0.05]
    #[arg(long)]
    pub texture: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, loss history and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file supplying any of the options below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// dct_tv, dct or gauss [default: dct_tv]
    #[arg(long)]
    pub init: Option<String>,
    /// [default: 13]
    #[arg(long)]
    pub stages: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub substages: Option<usize>,
    /// [default: 400]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: 0.01]
    #[arg(long)]
    pub lr: Option<f64>,
    /// gd or adam [default: gd]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// [default: 1]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of samples held out for validation [default: 0.1]
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Clip the global gradient norm to this value (off unless given).
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Seeds initialization and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial penalty parameter [default: 0.2]
    #[arg(long)]
    pub rho: Option<f64>,
    /// Initial multiplier update rate [default: 1.8]
    #[arg(long)]
    pub eta: Option<f64>,
    /// Only print the final summary.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Trained checkpoint (`.lckpt`).
    #[arg(long, required_unless_present = "zero_filled")]
    pub checkpoint: Option<PathBuf>,
    /// Use the zero-filled inverse FFT instead of a network.
    #[arg(long, conflicts_with = "checkpoint")]
    pub zero_filled: bool,
    /// Dataset directory; every sample is reconstructed into --out.
    #[arg(long, conflicts_with_all = ["kspace", "mask"], required_unless_present = "kspace")]
    pub data: Option<PathBuf>,
    /// Single k-space volume (`.cvol`), with --mask.
    #[arg(long, requires = "mask")]
    pub kspace: Option<PathBuf>,
    /// Sampling mask (`.cmask`) for --kspace.
    #[arg(long, requires = "kspace")]
    pub mask: Option<PathBuf>,
    /// Output directory with --data, output `.cvol` file with --kspace.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each frame's magnitude as a PGM image under this directory.
    #[arg(long)]
    pub export_frames: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub truth: PathBuf,
    /// Directory holding the reconstructions.
    #[arg(long)]
    pub recon: PathBuf,
    /// Reconstruction files are `<id>.<tag>.cvol`.
    #[arg(long, default_value = datadir::RECON_TAG)]
    pub tag: String,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match cli.command {
        Command::GenData(a) => ("gen-data", commands::gen_data(&a)),
        Command::Train(a) => ("train", commands::train(&a)),
        Command::Reconstruct(a) => ("reconstruct", commands::reconstruct(&a)),
        Command::Evaluate(a) => ("evaluate", commands::evaluate(&a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(commands::Usage(msg)) = e.downcast_ref::<commands::Usage>() {
                let mut cmd = Cli::command();
                let sub = cmd.find_subcommand_mut(name).expect("known subcommand");
                sub.error(clap::error::ErrorKind::ValueValidation, msg).exit();
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
