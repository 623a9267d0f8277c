//! `fodkit` command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use fodkit_cli::config::RunConfig;
use fodkit_cli::pipeline::{cmd_fit, cmd_metrics, cmd_reproduce, cmd_simulate, cmd_track, Experiment, Layout};
use fodkit_cli::CliError;

#[derive(Parser)]
#[command(name = "fodkit", version, about = "Fiber orientation distribution estimation on synthetic regions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate signals and write the ground truth.
    Simulate(Common),
    /// Fit every configured method to simulated signals.
    Fit(Common),
    /// Evaluate fitted fields against the truth.
    Metrics(Common),
    /// Track fitted fields.
    Track(Common),
    /// Run a named experiment or configuration end to end.
    Reproduce {
        /// Preset name (roi2d-1, roi2d-2, roi3d-b1000, roi3d-b3000,
        /// roi3d-multib); ignored when --config is given.
        experiment: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "fodkit-out")]
    out: PathBuf,
    /// Worker threads (defaults to the available cores).
    #[arg(long)]
    workers: Option<usize>,
}

fn load(common: &Common, preset: Option<&str>) -> Result<RunConfig, CliError> {
    let mut cfg = match (&common.config, preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => {
            return Err(CliError::Validation(
                "a configuration is required: pass --config <path> or an experiment name".into(),
            ))
        }
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, preset) = match &cli.command {
        Command::Simulate(c) | Command::Fit(c) | Command::Metrics(c) | Command::Track(c) => (c, None),
        Command::Reproduce { experiment, common } => (common, experiment.as_deref()),
    };
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(CliError::Validation("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("cannot start {n} workers: {e}")))?;
    }
    let cfg = load(common, preset)?;
    let layout = Layout::new(&common.out);
    let exp = Experiment::new(cfg, Some(&layout.bundle()))?;
    match cli.command {
        Command::Simulate(_) => cmd_simulate(&exp, &layout),
        Command::Fit(_) => cmd_fit(&exp, &layout),
        Command::Metrics(_) => cmd_metrics(&exp, &layout).map(|per_seed| {
            print_table(&fodkit_cli::pipeline::aggregate(&per_seed));
        }),
        Command::Track(_) => cmd_track(&exp, &layout).map(|records| {
            for r in records {
                println!(
                    "seed {} {}: {} tracts, median length {:.3}",
                    r.seed, r.label, r.summary.count, r.summary.median_length
                );
            }
        }),
        Command::Reproduce { .. } => cmd_reproduce(&exp, &layout).map(|s| {
            print_table(&s.table);
            for r in s.tracking {
                println!(
                    "seed {} {}: {} tracts, median length {:.3}",
                    r.seed, r.label, r.summary.count, r.summary.median_length
                );
            }
        }),
    }
}

fn print_table(rows: &[fodkit::metrics::MetricReport]) {
    println!("{}", fodkit::metrics::MetricReport::csv_header());
    for r in rows {
        println!("{}", r.csv_row());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
