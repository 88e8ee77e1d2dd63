//! Command-line harness: `prepare`, `train`, `eval`, `sweep` and `report`
//! driven by experiment manifests.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{CommandContext, OutputLock};
use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "osrkd", version, about = "Open-set knowledge distillation for point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment manifest (TOML).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Overrides `train.rng_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing caches and runs.
    #[arg(long)]
    pub force: bool,
    /// Synthetic shapes with the short CPU schedule.
    #[arg(long)]
    pub desk_scale: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample point clouds, build the splits and the pseudo-open set.
    Prepare(Common),
    /// Train the manifest's regime.
    Train(Common),
    /// Evaluate a trained run on the test partitions.
    Eval(Common),
    /// Train once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Hyperparameter name, e.g. `tau_kd`.
        #[arg(long)]
        parameter: Option<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Render tables and plots from every record under `output_dir`.
    Report(Common),
}

fn load(common: &Common) -> Result<(Manifest, CommandContext)> {
    let mut m = Manifest::load(&common.manifest)?;
    if common.desk_scale {
        m.apply_desk_scale();
    }
    if let Some(seed) = common.seed {
        m.train.rng_seed = seed;
    }
    Ok((
        m,
        CommandContext {
            manifest_path: common.manifest.clone(),
            force: common.force,
        },
    ))
}

pub fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Prepare(c) | Command::Train(c) | Command::Eval(c) | Command::Report(c) => c,
        Command::Sweep { common, .. } => common,
    };
    let (m, ctx) = load(common)?;
    let _lock = OutputLock::acquire(&m.output_dir)?;
    match &cli.command {
        Command::Prepare(_) => commands::prepare(&m, &ctx).map(drop),
        Command::Train(_) => commands::train(&m, &ctx).map(drop),
        Command::Eval(_) => commands::eval(&m, &ctx).map(drop),
        Command::Sweep { parameter, values, .. } => {
            commands::sweep(&m, &ctx, parameter.as_deref(), values.as_deref()).map(drop)
        }
        Command::Report(_) => commands::report(&m).map(drop),
    }
}
