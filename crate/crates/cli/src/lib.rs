//! The `derain` command line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable or malformed files), 3 numeric failure (divergence, failed
//! gradient check).

pub mod commands;
pub mod config;
pub mod io;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::NumericFailure;
pub use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "derain", version, about = "Train and run a tree-structured fusion deraining network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the parameter count and a per-layer table.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a manifest of image pairs and write a checkpoint.
    Train(TrainArgs),
    /// Derain one PNG.
    Derain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-channel fusion statistics to DIR/feature_stats.csv.
        #[arg(long, value_name = "DIR")]
        dump_features: Option<PathBuf>,
    },
    /// Per-image and mean PSNR/SSIM of the derained output against the clean image.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient on tiny networks.
    Gradcheck {
        /// Only the default fusion mode and one seed.
        #[arg(long)]
        tiny: bool,
    },
    /// Generate rainy/clean pairs and a manifest.
    Synth(SynthArgs),
    /// Mean single-image inference time.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest CSV of (clean_path, rainy_path, ...) rows.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Log CSV path; defaults to the checkpoint path with `.log.csv` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub fusion_mode: Option<String>,
    /// Any config field, as key=value. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of clean PNGs. Without it, `--generate` synthetic scenes are used.
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub angle: f64,
    #[arg(long, default_value_t = 9)]
    pub length: usize,
    #[arg(long, default_value_t = 0.8)]
    pub density: f64,
    #[arg(long, default_value_t = 0.5)]
    pub intensity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of synthetic clean scenes when no clean directory is given.
    #[arg(long, default_value_t = 8)]
    pub generate: usize,
    /// Side length of synthetic clean scenes.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Process exit status for an error, by its root cause.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<derain_core::Error>() {
            return match e {
                derain_core::Error::Diverged { .. } | derain_core::Error::NonFinite { .. } => 3,
                derain_core::Error::InvalidConfig(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match commands::dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}
