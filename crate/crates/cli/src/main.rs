use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use opmode_core::config::parse_config;
use opmode_core::par::Execution;
use opmode_core::pipeline::{Pipeline, Stage};

#[derive(Parser)]
#[command(
    name = "opmode",
    version,
    about = "Link-level operating-mode distributions and emissions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the traffic microsimulation for every configured scenario.
    Simulate(Common),
    /// Adjust the OD matrix until simulated counts match observed counts.
    CalibrateOd(Common),
    /// Bin trajectories and build the link feature dataset.
    BuildDataset(Common),
    /// Train the modular network.
    Train(Common),
    /// Predict operating-mode distributions with the trained network.
    Predict(Common),
    /// Predict distributions by drive-cycle interpolation.
    Baseline(Common),
    /// Link emissions from true and predicted distributions.
    Emissions(Common),
    /// Metrics, summary and plot data.
    Evaluate(Common),
    /// Every stage in order.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Use this seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding paths.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Command {
    fn split(self) -> (Option<Stage>, Common) {
        match self {
            Command::Simulate(c) => (Some(Stage::Simulate), c),
            Command::CalibrateOd(c) => (Some(Stage::CalibrateOd), c),
            Command::BuildDataset(c) => (Some(Stage::BuildDataset), c),
            Command::Train(c) => (Some(Stage::Train), c),
            Command::Predict(c) => (Some(Stage::Predict), c),
            Command::Baseline(c) => (Some(Stage::Baseline), c),
            Command::Emissions(c) => (Some(Stage::Emissions), c),
            Command::Evaluate(c) => (Some(Stage::Evaluate), c),
            Command::All(c) => (None, c),
        }
    }
}

fn run(stage: Option<Stage>, common: Common) -> opmode_core::Result<()> {
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = common.out {
        cfg.output_dir = out;
    }
    let exec = if common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let pipeline = Pipeline::new(cfg, exec);
    let manifests = match stage {
        Some(s) => vec![pipeline.run(s)?],
        None => pipeline.run_all()?,
    };
    for m in &manifests {
        println!("{}: {} outputs", m.stage, m.outputs.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (stage, common) = Cli::parse().command.split();
    match run(stage, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
