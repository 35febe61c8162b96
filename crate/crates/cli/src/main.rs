use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddsense::evaluation::format_reports;
use ddsense_cli::{
    cmd_detect, cmd_eval, cmd_generate, cmd_replica, cmd_report, cmd_train, Backend, CliResult, ExperimentConfig,
    Preset, Run,
};

/// Delay-Doppler sensing experiments: synthetic data, detection, training and evaluation.
#[derive(Parser)]
#[command(name = "ddsense", version)]
struct Cli {
    /// TOML file merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "toy")]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (DDS1 snapshots plus label sidecars).
    Generate {
        #[arg(long)]
        count: usize,
    },
    /// Train the heatmap network, reusing a cached checkpoint when possible.
    Train {
        /// Retrain even if a cached checkpoint exists.
        #[arg(long)]
        force: bool,
    },
    /// Detect paths in every snapshot of a dataset.
    Detect {
        #[arg(long, value_enum, default_value = "classical")]
        backend: Backend,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score detections against the dataset labels.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the three-receiver replica scenario end to end.
    Replica,
    /// Summarize the reports of a finished run.
    Report,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(cli.preset, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = Some(out);
    }
    let run = Run::new(cfg)?;
    match cli.command {
        Command::Generate { count } => {
            let dir = cmd_generate(&run, count)?;
            println!("{}", dir.display());
        }
        Command::Train { force } => {
            let t = cmd_train(&run, force)?;
            println!("{}{}", t.checkpoint.display(), if t.cached { " (cached)" } else { "" });
        }
        Command::Detect { backend, dataset, checkpoint } => {
            let path = cmd_detect(&run, backend, dataset.as_deref(), checkpoint.as_deref())?;
            println!("{}", path.display());
        }
        Command::Eval { detections, dataset } => {
            print!("{}", format_reports(&cmd_eval(&run, &detections, dataset.as_deref())?));
        }
        Command::Replica => {
            let outcome = cmd_replica(&run)?;
            print!("{}", format_reports(&outcome.uav_rows()));
            for (link, drop) in outcome.links.iter().zip(outcome.ablation_drops()) {
                println!("{}: {} P_D drop without clutter filter {drop:.2}", link.label, outcome.slow_track);
            }
        }
        Command::Report => print!("{}", cmd_report(&run)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
