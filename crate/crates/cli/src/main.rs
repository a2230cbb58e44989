//! `distvad`: simulation, feature extraction, beamforming analysis, training,
//! inference and scoring from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distvad::pipeline::FrontendKind;

#[derive(Parser, Debug)]
#[command(name = "distvad", version, about = "Multi-microphone VAD and overlapped speech detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scene (or a toy dataset) to WAV and RTTM files.
    Simulate {
        /// Generate this many toy segments from the scene as a template.
        #[arg(long)]
        toy: Option<usize>,
        /// Write 32-bit float WAV instead of 16-bit PCM.
        #[arg(long)]
        float: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Dump front-end features of a WAV file as CSV.
    Features {
        wav: PathBuf,
        /// Front end (stft, analytic, sacc, ecsacc, icsacc, mvdr).
        #[arg(long)]
        variant: Option<FrontendKind>,
        /// UCA radius used when the configuration has no geometry.
        #[arg(long, default_value_t = 0.1)]
        radius: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Beampattern CSV: time-averaged pattern of a model's combination
    /// weights, or a delay-and-sum pattern steered to `--steer`.
    Beampattern {
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Segment the model weights are computed on.
        #[arg(long)]
        wav: Option<PathBuf>,
        /// Analysis frequency in Hz (repeatable for the steered pattern).
        #[arg(long = "freq", required = true)]
        freqs: Vec<f64>,
        /// Steering azimuth in degrees.
        #[arg(long)]
        steer: Option<f64>,
        /// Number of microphones of the steered UCA.
        #[arg(long, default_value_t = 8)]
        mics: usize,
        #[arg(long, default_value_t = 0.1)]
        radius: f64,
        /// Angular grid size.
        #[arg(long, default_value_t = 360)]
        grid: usize,
        #[command(flatten)]
        common: Common,
    },
    /// SRP-PHAT energy map of a WAV file as CSV.
    Srp {
        wav: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        radius: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes model.ckpt, train.log and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Sliding-window inference; writes RTTM.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        wav: PathBuf,
        /// Also write per-frame posteriors to this CSV.
        #[arg(long)]
        posteriors: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a hypothesis RTTM against a reference; prints metrics JSON.
    Score {
        reference: PathBuf,
        hypothesis: PathBuf,
        /// Scoring duration in seconds (defaults to the last segment end).
        #[arg(long)]
        duration: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics with subsets of the microphones active.
    Maskeval {
        #[arg(long)]
        checkpoint: PathBuf,
        wav: PathBuf,
        /// Reference RTTM.
        #[arg(long)]
        rttm: PathBuf,
        /// Comma-separated kept channel ids (repeatable).
        #[arg(long = "keep", value_delimiter = ';')]
        keep: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<(), commands::CliError> {
    match cmd {
        Command::Simulate { toy, float, common } => commands::simulate(&common, toy, float),
        Command::Features {
            wav,
            variant,
            radius,
            common,
        } => commands::features(&common, &wav, variant, radius),
        Command::Beampattern {
            checkpoint,
            wav,
            freqs,
            steer,
            mics,
            radius,
            grid,
            common,
        } => commands::beampattern(
            &common,
            &commands::BeampatternArgs {
                checkpoint,
                wav,
                freqs,
                steer,
                mics,
                radius,
                grid,
            },
        ),
        Command::Srp { wav, radius, common } => commands::srp(&common, &wav, radius),
        Command::Train { common } => commands::train(&common),
        Command::Infer {
            checkpoint,
            wav,
            posteriors,
            common,
        } => commands::infer(&common, &checkpoint, &wav, posteriors.as_deref()),
        Command::Score {
            reference,
            hypothesis,
            duration,
            common,
        } => commands::score(&common, &reference, &hypothesis, duration),
        Command::Maskeval {
            checkpoint,
            wav,
            rttm,
            keep,
            common,
        } => commands::maskeval(&common, &checkpoint, &wav, &rttm, &keep),
    }
}
