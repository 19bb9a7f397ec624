//! `bitspike`: train quantized ANNs, convert them to bit-serial SNNs, verify
//! the conversion, run spiking inference, and analyze energy and errors.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bitspike::snn::Scheduler;

/// Process exit status paired with the error that caused it.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    /// Bad flags, unreadable inputs, invalid configs.
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }

    /// Training diverged.
    pub fn numeric(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 3,
            error: error.into(),
        }
    }

    /// Verification ran and found deviations above tolerance.
    pub fn verification(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 4,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "bitspike", version, about = "Lossless ANN to bit-serial SNN conversion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchedulerArg {
    LayerByLayer,
    StepByStep,
}

impl From<SchedulerArg> for Scheduler {
    fn from(s: SchedulerArg) -> Self {
        match s {
            SchedulerArg::LayerByLayer => Scheduler::LayerByLayer,
            SchedulerArg::StepByStep => Scheduler::StepByStep,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a quantized ANN from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; the manifest goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert an ANN checkpoint into an SNN checkpoint.
    Convert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        timesteps: u32,
        #[arg(long)]
        out: PathBuf,
        /// Require T = log2(Q).
        #[arg(long)]
        exact: bool,
        /// Plain reset-by-subtraction IF neurons instead of bit-serial ones.
        #[arg(long, conflicts_with = "exact")]
        baseline: bool,
    },
    /// Compare an ANN and its converted SNN on random inputs.
    Verify {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        snn: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        /// Write the comparison as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a model on IDX images or synthetic samples.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// IDX image file, or `synthetic`.
        #[arg(long)]
        input: String,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SchedulerArg::LayerByLayer)]
        scheduler: SchedulerArg,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for per-layer bit-packed spike trains.
        #[arg(long)]
        dump_spikes: Option<PathBuf>,
        /// Write predictions as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error decomposition, spiking activity and energy estimate for an ANN.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        /// IDX image file, or `synthetic`.
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to log2(Q).
        #[arg(long)]
        timesteps: Option<u32>,
        /// JSON table overriding the built-in per-operation energies.
        #[arg(long)]
        energy_table: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        width: u32,
        /// Also compare against the unquantized ReLU.
        #[arg(long)]
        float_reference: bool,
        /// Add SNN accuracy for every T from 1 to log2(Q).
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Train { config, out } => commands::train(&args, &config, &out),
        Command::Convert {
            model,
            timesteps,
            out,
            exact,
            baseline,
        } => commands::convert(&args, &model, timesteps, &out, exact, baseline),
        Command::Verify {
            ann,
            snn,
            samples,
            tol,
            seed,
            precision,
            report,
        } => commands::verify(&args, &ann, &snn, samples, tol, seed, precision, report.as_deref()),
        Command::Infer {
            model,
            input,
            labels,
            scheduler,
            samples,
            seed,
            dump_spikes,
            out,
        } => commands::infer(
            &args,
            &commands::InferArgs {
                model,
                input,
                labels,
                scheduler: scheduler.into(),
                samples,
                seed,
                dump_spikes,
                out,
            },
        ),
        Command::Analyze {
            model,
            dataset,
            labels,
            samples,
            seed,
            timesteps,
            energy_table,
            width,
            float_reference,
            sweep,
            report,
        } => commands::analyze(
            &args,
            &commands::AnalyzeArgs {
                model,
                dataset,
                labels,
                samples,
                seed,
                timesteps,
                energy_table,
                width,
                float_reference,
                sweep,
                report,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
