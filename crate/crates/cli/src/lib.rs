//! Command-line front end: dataset generation, experiment runs, analysis
//! exports and checkpoint inspection, all driven by a TOML experiment file.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

pub mod analyze;
pub mod config;
pub mod error;
pub mod generate;
pub mod inspect;
pub mod run;
mod store;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, OUTPUT_ROOT_ENV};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "tpamtl",
    version,
    about = "Uncertainty-gated asymmetric multi-task learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment file (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root; relative `eval.output_dir` values resolve against it.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the dataset's train/valid/test CSV files and manifest.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Target directory; `<experiment>/data` by default.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train every (variant, seed) cell that has no record yet.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parallel cells.
        #[arg(short, long, default_value_t = 1)]
        workers: usize,
    },
    /// Negative-transfer report, uncertainty/transfer correlations and
    /// transfer-graph exports for a finished experiment.
    Analyze {
        /// Experiment directory written by `run`.
        dir: PathBuf,
        /// Overrides `eval.graph_instances`.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Summarise a checkpoint file.
    InspectCheckpoint {
        path: PathBuf,
        /// Print every parameter.
        #[arg(long)]
        params: bool,
        #[arg(long)]
        json: bool,
    },
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = ExperimentConfig::load(&config.config, &config.overrides)?;
            let dir = match out {
                Some(d) => d,
                None => config::experiment_dir(&cfg, &config.config, config.root.as_deref()).join("data"),
            };
            let manifest = generate::generate(&cfg, &dir)?;
            println!(
                "wrote {} ({} train / {} valid / {} test instances)",
                dir.display(),
                manifest.splits[0].instances,
                manifest.splits[1].instances,
                manifest.splits[2].instances
            );
            Ok(())
        }
        Command::Run { config, workers } => {
            let cfg = ExperimentConfig::load(&config.config, &config.overrides)?;
            let dir = config::experiment_dir(&cfg, &config.config, config.root.as_deref());
            let summary = run::run(&cfg, &dir, workers)?;
            println!("{summary}");
            Ok(())
        }
        Command::Analyze { dir, instances } => {
            let summary = analyze::analyze(&dir, instances)?;
            println!("{summary}");
            Ok(())
        }
        Command::InspectCheckpoint { path, params, json } => {
            print!("{}", inspect::inspect(&path, params, json)?);
            Ok(())
        }
    }
}
