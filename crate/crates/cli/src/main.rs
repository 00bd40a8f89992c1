use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccdm::config::RunConfig;
use ccdm::harness::{self, SweepAxis};
use ccdm::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train, evaluate and compare contrastive conditional diffusion forecasters.
#[derive(Debug, Parser)]
#[command(name = "ccdm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoints, logs and the resolved config.
    Train(Common),
    /// Score a checkpoint on the test windows.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoints/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the sampled ensemble for one test window.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index of the test window.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Train and evaluate the full model, λ = 0, and dense mixing.
    Ablate(Common),
    /// Train and evaluate once per value of one contrastive setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values, e.g. `0.0001,0.001,0.01`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    Lambda,
    /// Negatives per augmentation type.
    Negatives,
    Tau,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Lambda => SweepAxis::Lambda,
            Axis::Negatives => SweepAxis::Negatives,
            Axis::Tau => SweepAxis::Tau,
        }
    }
}

fn load(c: &Common) -> ccdm::Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<S: serde::Serialize>(v: &S) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    // a closed pipe (e.g. `| head`) is not an error for a report
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> ccdm::Result<()> {
    match cli.command {
        Command::Train(c) => print(&harness::cmd_train(&load(&c)?)?),
        Command::Evaluate { common, checkpoint } => {
            print(&harness::cmd_evaluate(&load(&common)?, checkpoint.as_deref())?)
        }
        Command::Sample {
            common,
            checkpoint,
            window,
        } => print(&harness::cmd_sample(&load(&common)?, checkpoint.as_deref(), window)?),
        Command::Ablate(c) => print(&harness::cmd_ablate(&load(&c)?)?),
        Command::Sweep {
            common,
            axis,
            values,
            parallel,
        } => print(&harness::cmd_sweep(&load(&common)?, axis.into(), &values, parallel)?),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Fingerprint { .. } => 2,
        Error::Io { path, .. } if is_input(path) => 2,
        _ => 3,
    }
}

fn is_input(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "toml")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
