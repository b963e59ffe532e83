use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rmlqr::config::{self, load_config, parse_value, ExperimentConfig, SweepConfig};
use rmlqr::report::{fmt_g9, run_to_dir};
use rmlqr::Error;

/// Robust multitask adaptive LQR experiments.
#[derive(Parser)]
#[command(name = "rmlqr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory (overrides the config and RMLQR_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results are identical for any count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config file or preset (and its sweep, if any).
    Run {
        config: String,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run a config or preset over a list of values for one parameter.
    Sweep {
        config: String,
        /// Dotted parameter key, e.g. attack.rho_byz.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Check a config file or preset without running it.
    Validate { config: String },
    /// List the built-in presets.
    Presets,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn prepare(mut cfg: ExperimentConfig, args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), Failure> {
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.apply_out_env();
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if args.workers == Some(0) {
        return Err(Failure::Config("--workers must be at least 1".into()));
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

fn execute(cfg: ExperimentConfig, args: &RunArgs) -> Result<(), Failure> {
    let (cfg, out) = prepare(cfg, args)?;
    let (runs, written) = run_to_dir(&cfg, &out, args.workers)?;
    for run in &runs {
        if let Some(last) = run.outcome.summary.last() {
            let label = run.sweep_value.as_deref().unwrap_or("base");
            println!(
                "{} [{}]: final mean regret {} (std {}), est error {}, misclass {} over {} seeds",
                cfg.scenario,
                label,
                fmt_g9(last.mean_regret),
                fmt_g9(last.std_regret),
                fmt_g9(last.mean_est_error),
                fmt_g9(last.misclass_rate),
                last.n_seeds
            );
        }
    }
    println!("wrote {} files under {}", written.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Presets => {
            for name in config::PRESETS {
                println!("{name}");
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let runs = cfg.expand_sweep()?.len();
            println!("ok: {} ({} run{})", cfg.scenario, runs, if runs == 1 { "" } else { "s" });
            Ok(())
        }
        Command::Run { config, args } => execute(load_config(&config)?, &args),
        Command::Sweep { config, param, values, args } => {
            let mut cfg = load_config(&config)?;
            cfg.sweep = Some(SweepConfig { param, values: values.iter().map(|v| parse_value(v)).collect() });
            execute(cfg, &args)
        }
    }
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
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
