use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use nilm_core::config::{Baseline, Config};
use nilm_core::workflow::{Run, Stage, StageOptions};
use nilm_core::Error;

/// Non-intrusive load monitoring: profile extraction, disaggregation and
/// short-term forecasting of aggregate power measurements.
#[derive(Parser, Debug)]
#[command(name = "nilm", version)]
struct Cli {
    /// TOML configuration file; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set disaggregation.particles=60`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Directory holding all artifacts and the manifest.
    #[arg(long, default_value = "run", global = true)]
    run_dir: PathBuf,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic scenario.
    SynthGen,
    /// Load, validate and gap-fill the measurement series.
    Ingest,
    /// Detect events, cluster them and blend device profiles.
    ExtractProfiles,
    /// Explain the series as device state changes.
    Disaggregate,
    /// Train the state forecasting network.
    TrainForecast,
    /// Forecast the next 15 minutes.
    Predict {
        /// Unix timestamp of the first forecast second.
        #[arg(long)]
        at: Option<i64>,
    },
    /// Score forecasts and disaggregation against the measurements.
    Evaluate {
        /// Persistence baseline to report next to the model (repeatable).
        #[arg(long, value_parser = parse_baseline)]
        baseline: Vec<Baseline>,
    },
    /// Run every stage in order.
    Pipeline,
}

fn parse_baseline(s: &str) -> Result<Baseline, String> {
    Baseline::parse(s).ok_or_else(|| format!("unknown baseline `{s}` (expected persistence-15min or persistence-7d)"))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        Some(Error::Dependency { .. }) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Command::Predict { at: Some(ts) } = &cli.command {
        overrides.push(format!("forecast.predict_at={ts}"));
    }
    let config = Config::load(cli.config.as_deref(), &overrides)?;
    let run = Run::new(&cli.run_dir, config);
    let mut opts = StageOptions::default();
    let stage = match cli.command {
        Command::SynthGen => Stage::SynthGen,
        Command::Ingest => Stage::Ingest,
        Command::ExtractProfiles => Stage::ExtractProfiles,
        Command::Disaggregate => Stage::Disaggregate,
        Command::TrainForecast => Stage::TrainForecast,
        Command::Predict { .. } => Stage::Predict,
        Command::Evaluate { baseline } => {
            if !baseline.is_empty() {
                opts.baselines = Some(baseline);
            }
            Stage::Evaluate
        }
        Command::Pipeline => {
            run.pipeline(&opts)?;
            return Ok(());
        }
    };
    run.run(stage, &opts)
        .with_context(|| format!("{} failed", stage.name()))
        .map_err(|e| e.context(format!("run directory {}", run.dir().display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
