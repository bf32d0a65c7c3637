use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use radar_ood_harness::pipeline::{
    calibrate_stage, detect_stage, report_stage, run_pipeline, simulate_stage, thread_pool, train_stage,
};
use radar_ood_harness::{ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "radar-ood", version, about = "CVAE / ANMF radar detection experiments")]
struct Cli {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate H₀ training profiles.
    Simulate,
    /// Train one CVAE per environment and preprocessing mode.
    Train,
    /// Fit ECDF banks, fusion weights and CFAR thresholds.
    Calibrate,
    /// Sweep the (SNR, Doppler) grid and audit false alarms.
    Detect,
    /// Render SVG figures from the surfaces CSV.
    Report,
    /// Run every stage in order.
    Pipeline,
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Simulate => simulate_stage(&cfg, &thread_pool(&cfg)?),
        Command::Train => train_stage(&cfg).map(drop),
        Command::Calibrate => calibrate_stage(&cfg, &thread_pool(&cfg)?).map(drop),
        Command::Detect => detect_stage(&cfg, &thread_pool(&cfg)?).map(drop),
        Command::Report => {
            for path in report_stage(&cfg)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Pipeline => run_pipeline(&cfg).map(drop),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
