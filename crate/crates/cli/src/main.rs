use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use scotopic_harness::experiment::{rerun, run_task, Task};
use scotopic_harness::ExperimentConfig;

#[derive(Parser)]
#[command(name = "scotopic", version, about = "Scotopic classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSVs, models and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps every data split at this many images.
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and save it.
    Train(Common),
    /// Optimize free-response threshold schedules for each cost of time.
    TuneThresholds(Common),
    /// Speed-accuracy sweep in the configured regime.
    SweepSat(Common),
    /// Free-response sweep over one noise parameter.
    SweepNoise(Common),
    /// Fit and evaluate the light-level estimator.
    FitLight(Common),
    /// Spiking runtime power/accuracy sweep.
    SpikingBench(Common),
    /// Bits of signal per pixel by illuminance and exposure time.
    ExposureTable(Common),
    /// Train, tune (free response only) and sweep in one go.
    Run(Common),
    /// Re-run a manifest and check that every output is byte-identical.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.run.out = out.clone();
    }
    if let Some(n) = common.subset {
        cfg.apply_subset(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (task, common) = match cli.command {
        Command::Train(c) => (Task::Train, c),
        Command::TuneThresholds(c) => (Task::TuneThresholds, c),
        Command::SweepSat(c) => (Task::SweepSat, c),
        Command::SweepNoise(c) => (Task::SweepNoise, c),
        Command::FitLight(c) => (Task::FitLight, c),
        Command::SpikingBench(c) => (Task::SpikingBench, c),
        Command::ExposureTable(c) => (Task::ExposureTable, c),
        Command::Run(c) => (Task::Run, c),
        Command::Rerun { manifest, out } => {
            let (new, differing) = rerun(&manifest, out)?;
            if !differing.is_empty() {
                bail!("outputs differ from the manifest: {}", differing.join(", "));
            }
            println!("{} outputs reproduced in {}", new.artifacts.len(), new.config.run.out.display());
            return Ok(());
        }
    };
    let manifest = run_task(task, &resolve(&common)?)?;
    for stage in &manifest.stages {
        println!("{:<16} {:>9.2}s", stage.name, stage.seconds);
    }
    for a in &manifest.artifacts {
        println!("wrote {}", manifest.config.run.out.join(&a.file).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
