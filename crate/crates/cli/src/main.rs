mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use degap::prefixes::Variant;
use degap::DegapError;

use config::Overrides;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config file; exit code 2.
    Usage(String),
    /// Anything that fails while running; exit code 1.
    Runtime(DegapError),
}

impl From<DegapError> for CliError {
    fn from(e: DegapError) -> Self {
        Self::Runtime(e)
    }
}

#[derive(Parser)]
#[command(name = "degap", version, about = "Event argument extraction with dual event-guided adaptive prefixes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an ontology and a train/dev/test corpus as JSONL
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_contexts: Option<usize>,
        /// Contexts kept for train+dev; the rest become the test split
        #[arg(long)]
        train_contexts: Option<usize>,
    },
    /// Train one model; writes checkpoint, loss curve and reports to a run directory
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Root under which the run directory is created
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Score a checkpoint on a JSONL file
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the full report as JSON here
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write predicted arguments for a JSONL file
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant under every seed and tabulate mean ± std
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Comma-separated seeds (default from config: 1..5)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated variant names (default: all)
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
    },
    /// Vary one prefix length at a time and record Arg-I/Arg-C
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Compare analytic gradients with central differences on a tiny model
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = Variant::Full)]
        variant: Variant,
        /// Weight init std; larger than the training default so gradients
        /// stay above finite-difference noise
        #[arg(long, default_value_t = 0.3)]
        init_std: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            out,
            config,
            seed,
            n_contexts,
            train_contexts,
        } => commands::gen_data(&out, config.as_deref(), seed, n_contexts, train_contexts),
        Command::Train { overrides, out } => commands::train(&overrides.resolve()?, &out),
        Command::Eval {
            checkpoint,
            ontology,
            data,
            report,
        } => commands::eval(&checkpoint, &ontology, &data, report.as_deref()),
        Command::Predict {
            checkpoint,
            ontology,
            data,
            out,
        } => commands::predict(&checkpoint, &ontology, &data, &out),
        Command::Ablate {
            overrides,
            out,
            seeds,
            variants,
        } => {
            let mut cfg = overrides.resolve()?;
            if let Some(s) = seeds {
                cfg.experiment.seeds = s;
            }
            if let Some(v) = variants {
                cfg.experiment.variants = v;
            }
            commands::ablate(&cfg, &out)
        }
        Command::Sweep {
            overrides,
            out,
            seeds,
            lengths,
        } => {
            let mut cfg = overrides.resolve()?;
            if let Some(s) = seeds {
                cfg.experiment.seeds = s;
            }
            if let Some(l) = lengths {
                cfg.experiment.sweep_lengths = l;
            }
            commands::sweep(&cfg, &out)
        }
        Command::GradCheck {
            seed,
            d_model,
            samples,
            variant,
            init_std,
        } => commands::grad_check_cmd(seed, d_model, samples, variant, init_std),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
