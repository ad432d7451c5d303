mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "cmflow",
    version,
    about = "Radar scene flow with cross-modal pseudo-labels"
)]
struct Cli {
    /// Worker threads; 1 runs every stage sequentially.
    #[arg(long, global = true, env = "CMFLOW_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Field {
    Initial,
    Final,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Baseline {
    Icp,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-sensor sequence.
    Simulate {
        /// Simulator config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract pseudo-labels from a sequence and report their quality.
    Labels {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label config (JSON); flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        eta_v: Option<f64>,
        #[arg(long)]
        eta_l: Option<f64>,
        /// Threshold raw RRV residuals instead of bias-corrected ones.
        #[arg(long)]
        direct_threshold: bool,
    },
    /// Train the flow network.
    Train {
        /// Sequence directories, each holding labels.jsonl or labelled on the fly.
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Held-out sequences with ground truth; selects best.bin.
        #[arg(long, num_args = 1..)]
        val: Vec<PathBuf>,
    },
    /// Run a checkpoint over a sequence and dump per-pair predictions.
    Infer {
        #[arg(long, required_unless_present = "from_truth")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit the ground truth in prediction format instead of running a model.
        #[arg(long, conflicts_with = "ckpt")]
        from_truth: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Prediction directory or predictions.jsonl.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        resolution_ratio: f64,
        #[arg(long, value_enum, default_value_t = Field::Final)]
        field: Field,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accumulate per-pair ego motion into trajectories.
    Odometry {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss through a freshly initialised model.
    Gradcheck {
        #[arg(long, default_value_t = 0.125)]
        scale: f64,
        #[arg(long, default_value_t = 32)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 3)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Directory for a JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        cmflow::parallel::configure_threads(n as usize);
    }
    let ctx = commands::Context::new();
    match cli.command {
        Command::Simulate { config, seed, out } => {
            commands::simulate(&ctx, config.as_deref(), seed, &out)
        }
        Command::Labels {
            seq,
            out,
            config,
            eta_v,
            eta_l,
            direct_threshold,
        } => commands::labels(
            &ctx,
            &seq,
            &out,
            config.as_deref(),
            eta_v,
            eta_l,
            direct_threshold,
        ),
        Command::Train {
            data,
            config,
            out,
            resume,
            val,
        } => commands::train(
            &ctx,
            &data,
            config.as_deref(),
            &out,
            resume.as_deref(),
            &val,
        ),
        Command::Infer {
            ckpt,
            seq,
            out,
            from_truth,
        } => commands::infer(&ctx, ckpt.as_deref(), &seq, &out, from_truth),
        Command::Eval {
            pred,
            seq,
            resolution_ratio,
            field,
            out,
        } => commands::eval(&ctx, &pred, &seq, resolution_ratio, field, &out),
        Command::Odometry {
            pred,
            seq,
            baseline,
            out,
        } => commands::odometry(&ctx, &pred, &seq, baseline, &out),
        Command::Gradcheck {
            scale,
            points,
            seed,
            per_param,
            tolerance,
            out,
        } => commands::gradcheck(
            &ctx,
            scale,
            points,
            seed,
            per_param,
            tolerance,
            out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let detail = e.to_string();
            let first = detail
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).to_line());
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
