//! `boosts`: simulate, fit, predict, evaluate, tune and compare from the
//! command line.
//!
//! Exit codes: 0 success, 2 usage or validation, 3 numerical failure, 4 IO.
//! Failures also print a one-line JSON object on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use boosts::ErrorClass;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Core(boosts::Error),
}

impl From<boosts::Error> for CliError {
    fn from(e: boosts::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 4,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Numerical => 3,
                ErrorClass::Io => 4,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self.code() {
            2 => "usage",
            3 => "numerical",
            _ => "io",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Io(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "boosts", version, about = "Gradient boosted trees for spatially correlated data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed the command uses.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Configuration override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset and write it with its ground truth.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
        /// `grid` or `uniform_random`.
        #[arg(long)]
        layout: Option<String>,
    },
    /// Fit an ensemble; writes the model, its trace and the initial variogram.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict from a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score predictions against the truth.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Explore (λ, γ) over a space-filling design.
    Tune {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Replicated comparison against the baselines on simulated data.
    Compare {
        #[arg(long)]
        replicates: Option<usize>,
    },
}

fn fail(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e.kind(), "message": e.message() });
    eprintln!("{line}");
    ExitCode::from(e.code())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.set)?;
    if let Some(s) = cli.common.seed {
        cfg.seed = Some(s);
    }
    if let Some(w) = cli.common.workers {
        cfg.workers = Some(w);
    }
    if let Some(o) = cli.common.out {
        cfg.out = Some(o);
    }
    if let Some(s) = cfg.seed {
        cfg.simulate.seed = s;
        cfg.fit.seed = s;
    }
    cfg.validate()?;
    if let Some(w) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {w} workers: {e}")))?;
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));

    match cli.command {
        Command::Simulate { n, layout } => {
            if let Some(n) = n {
                cfg.simulate.n = n;
            }
            if let Some(l) = layout {
                cfg.simulate.layout = serde_json::from_value(serde_json::Value::String(l.clone()))
                    .map_err(|_| CliError::Usage(format!("unknown layout '{l}'")))?;
            }
            cfg.simulate.validate()?;
            commands::simulate(&cfg, &out)
        }
        Command::Fit { data } => commands::fit(&cfg, data, &out),
        Command::Predict { model, data } => commands::predict(&model, &data, &out),
        Command::Evaluate { truth, predictions } => commands::evaluate(&cfg, &truth, &predictions),
        Command::Tune { data } => commands::tune(&cfg, data, &out),
        Command::Compare { replicates } => {
            if let Some(r) = replicates {
                cfg.compare.replicates = r;
            }
            cfg.validate()?;
            commands::compare(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.to_string().lines().next().unwrap_or("").to_string())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
