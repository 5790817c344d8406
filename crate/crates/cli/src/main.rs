//! `latformer`: synthetic task generation, training sweeps, mask dumps and reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latformer::harness::{self, ExperimentConfig, ResultRow};
use latformer::model::Variant;
use latformer::{Error, LatticeAction, LatticeShape};

#[derive(Parser)]
#[command(name = "latformer", version, about = "Lattice-symmetry attention masks and geometric task sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Suite seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic task suite and its manifest.
    Gen(Common),
    /// Train and evaluate every task over the train-size ladder.
    TrainEval {
        #[command(flatten)]
        common: Common,
        /// Run only this model variant.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Train and evaluate every task at each noise level.
    Noise {
        #[command(flatten)]
        common: Common,
        /// Model variant for the sweep.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Write the exact mask of an action as .pgm or .json.
    Mask {
        /// Action such as `translate:1,1`, `rotate:1`, `reflect:diag`, `scale-up:2,2`.
        #[arg(long)]
        action: LatticeAction,
        /// Lattice shape such as `8x8` or `16`.
        #[arg(long)]
        shape: LatticeShape,
        /// Output file; the extension picks the format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize result files per category, variant, size and noise.
    Report {
        /// Directory holding the result files.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidAction(_) | Error::InvalidShape(_) | Error::InvalidFactor(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(common: &Common, variant: Option<Variant>) -> Result<ExperimentConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.suite_seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(jobs) = common.jobs {
        config.jobs = jobs;
    }
    if let Some(v) = variant {
        config.variants = vec![v];
        config.noise_variant = v;
    }
    config.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(config)
}

fn print_row(row: &ResultRow) {
    let status = if row.error.is_empty() {
        format!("acc {:.3}{}", row.accuracy, if row.solved { " solved" } else { "" })
    } else {
        format!("failed: {}", row.error)
    };
    eprintln!(
        "{} {} n={} w={} {status} ({:.1}s)",
        row.task, row.variant, row.train_size, row.noise, row.wall_time_s
    );
}

fn print_summary(summary: &[harness::SummaryRow]) {
    println!("category,variant,train_size,noise,tasks,solved,failed,mean_accuracy,std_accuracy");
    for s in summary {
        println!(
            "{},{},{},{},{},{},{},{:.4},{:.4}",
            s.category, s.variant, s.train_size, s.noise, s.tasks, s.solved, s.failed, s.mean_accuracy, s.std_accuracy
        );
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen(common) => {
            let config = load_config(&common, None)?;
            let tasks = harness::generate_suite(&config)?;
            println!(
                "wrote {} tasks to {}",
                tasks.len(),
                config.output_dir.join(harness::TASKS_DIR).display()
            );
        }
        Command::TrainEval { common, variant } => {
            let config = load_config(&common, variant)?;
            let tasks = harness::load_suite(&config)?;
            let rows = harness::train_eval(&config, &tasks, print_row)?;
            print_summary(&harness::summarize(&rows));
        }
        Command::Noise { common, variant } => {
            let config = load_config(&common, variant)?;
            let tasks = harness::load_suite(&config)?;
            let rows = harness::noise_sweep(&config, &tasks, print_row)?;
            print_summary(&harness::summarize(&rows));
        }
        Command::Mask { action, shape, out } => {
            harness::write_mask(&action, &shape, &out)?;
            println!("wrote {action} on {shape} to {}", out.display());
        }
        Command::Report { out } => {
            let summary = harness::report(&out)?;
            print_summary(&summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
