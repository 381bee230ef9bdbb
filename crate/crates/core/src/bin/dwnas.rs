use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dwnas::config::ExperimentConfig;
use dwnas::pipeline::{worker_threads, Command, Run};
use dwnas::Result;

#[derive(Parser)]
#[command(name = "dwnas", version, about = "Transformable architecture search pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Latency constraint in ms (search and ablate).
    #[arg(long)]
    constraint_ms: Option<f64>,
    /// Verification recomputes the transform in f64.
    #[arg(long = "f64")]
    f64_mode: bool,
    /// Let `report` combine artifacts from different configs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Measure architectures on the latency oracle and fit the predictor.
    LatencyFit(Common),
    /// Run the hardware-aware architecture search.
    Search(Common),
    /// Train the searched network from scratch.
    Train(Common),
    /// Collapse linear blocks and fold batch norms.
    Transform(Common),
    /// Check the transformed network against the trained one.
    Verify(Common),
    /// Per-resolution batch-norm statistics calibration.
    Calibrate(Common),
    /// Accuracy and latency at every grid resolution.
    Eval(Common),
    /// Sampling-strategy, elastic-training and hybrid-training ablations.
    Ablate(Common),
    /// Summaries and plots over the produced artifacts.
    Report(Common),
}

impl Cmd {
    fn split(self) -> (Command, Common) {
        match self {
            Cmd::GenData(c) => (Command::GenData, c),
            Cmd::LatencyFit(c) => (Command::LatencyFit, c),
            Cmd::Search(c) => (Command::Search, c),
            Cmd::Train(c) => (Command::Train, c),
            Cmd::Transform(c) => (Command::Transform, c),
            Cmd::Verify(c) => (Command::Verify, c),
            Cmd::Calibrate(c) => (Command::Calibrate, c),
            Cmd::Eval(c) => (Command::Eval, c),
            Cmd::Ablate(c) => (Command::Ablate, c),
            Cmd::Report(c) => (Command::Report, c),
        }
    }
}

fn run(cmd: Command, args: Common) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.constraint_ms {
        cfg.search.constraint_ms = Some(t);
    }
    cfg.validate()?;
    let mut run = Run::new(cfg, args.out);
    run.f64_mode = args.f64_mode;
    run.force = args.force;
    run.threads = worker_threads()?;
    let summary = run.execute(cmd)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (cmd, args) = Cli::parse().command.split();
    match run(cmd, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
