//! `kom`: tune kernels, compute KOM weights, estimate effects and run
//! simulation sweeps.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Comparison;
use config::{jobs_from_env, parse_methods, FileConfig, LambdaArg, RunConfig};
use error::CliError;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  invalid data, configuration or arguments
  3  hyperparameter tuning failed
  4  every kernel in the fallback ladder failed to solve
  5  every replicate of a simulation cell failed

Settings are resolved as flags, then the --config TOML file, then defaults.
The resolved configuration is echoed into every JSON report.";

#[derive(Debug, Parser)]
#[command(name = "kom", version, about = "Kernel optimal matching weights and treatment effect estimates", after_help = EXIT_CODES)]
struct Cli {
    /// TOML file with default settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit per-arm GP hyperparameters by maximum marginal likelihood.
    #[command(after_help = EXIT_CODES)]
    Tune {
        #[command(flatten)]
        model: ModelArgs,
        /// JSON output path; stdout when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compute KOM weights and write `id,w,v` rows.
    #[command(after_help = EXIT_CODES)]
    Weights {
        #[command(flatten)]
        model: ModelArgs,
        /// Hyperparameter JSON written by `kom tune`.
        #[arg(long)]
        hyperparams: Option<PathBuf>,
        /// Weights CSV path; stdout when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Diagnostics JSON path; printed to stdout when the weights go to a file.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Estimate the effect from a weights file or end to end.
    #[command(after_help = EXIT_CODES)]
    Estimate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        hyperparams: Option<PathBuf>,
        /// `id,w,v` CSV to use instead of solving for KOM weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Comparison methods: all, ipw, overlap, truncated, outcome-regression.
        #[arg(long)]
        compare: Option<String>,
        /// JSON output path; stdout when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the Monte Carlo sweep over positivity and misspecification levels.
    #[command(after_help = EXIT_CODES)]
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Data CSV with columns id,t,s,y,x1..xp.
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// sate, satt, tate, owate, osate, kowate or kosate.
    #[arg(long)]
    estimand: Option<String>,
    /// Kernel family: product-poly, poly-mahalanobis or gaussian.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    degree: Option<u32>,
    /// Variance penalty: gp-tuned, zero or a fixed value.
    #[arg(long)]
    lambda: Option<LambdaArg>,
    /// printed (σ²/γ²) or linear-scale (σ²/γ).
    #[arg(long)]
    lambda_convention: Option<String>,
    /// Number of units selected by kosate.
    #[arg(long)]
    subset_size: Option<usize>,
    /// Propensity truncation level for osate and kosate.
    #[arg(long)]
    truncation: Option<f64>,
    #[arg(long)]
    propensity_degree: Option<u32>,
    #[arg(long)]
    outcome_degree: Option<u32>,
    /// Solver tolerance on the relative primal and dual residuals.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Check {
    Consistency,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Comma-separated positivity levels.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Comma-separated misspecification weights (1 is correct).
    #[arg(long, value_delimiter = ',')]
    gamma_levels: Option<Vec<f64>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated methods, or `all`.
    #[arg(long)]
    methods: Option<String>,
    /// Worker threads; defaults to KOM_JOBS, then the number of logical cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tune on replicate 0 and reuse the hyperparameters.
    #[arg(long)]
    tune_once: bool,
    /// Run a scaling check instead of the sweep.
    #[arg(long, value_enum)]
    check: Option<Check>,
    /// Sample sizes for the scaling check.
    #[arg(long, value_delimiter = ',', default_value = "100,200,400,800")]
    n_grid: Vec<usize>,
    /// Output directory for summary.csv, long.csv and results.json; the
    /// summary goes to stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<LambdaArg>,
    #[arg(long)]
    truncation: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

fn parsed<T: std::str::FromStr<Err = kom_core::Error>>(v: &str) -> Result<T, CliError> {
    v.parse().map_err(|e: kom_core::Error| CliError::Usage(e.to_string()))
}

fn apply_model(cfg: &mut RunConfig, m: ModelArgs) -> Result<(), CliError> {
    if m.input.is_some() {
        cfg.input = m.input;
    }
    if let Some(v) = m.estimand {
        cfg.estimand = parsed(&v)?;
    }
    if let Some(v) = m.family {
        cfg.family = parsed(&v)?;
    }
    if let Some(v) = m.degree {
        cfg.degree = v;
    }
    if let Some(v) = m.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = m.lambda_convention {
        cfg.lambda_convention = parsed(&v)?;
    }
    if m.subset_size.is_some() {
        cfg.subset_size = m.subset_size;
    }
    if let Some(v) = m.truncation {
        cfg.truncation = v;
    }
    if let Some(v) = m.propensity_degree {
        cfg.propensity_degree = v;
    }
    if let Some(v) = m.outcome_degree {
        cfg.outcome_degree = v;
    }
    if let Some(v) = m.eps {
        cfg.eps = v;
    }
    if let Some(v) = m.max_iter {
        cfg.max_iter = v;
    }
    Ok(())
}

fn resolve(name: &str, file: Option<&FileConfig>) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::defaults(name);
    match file {
        Some(f) => cfg.with_file(f),
        None => Ok(cfg),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref().map(FileConfig::load).transpose()?;
    match cli.command {
        Command::Tune { model, output } => {
            let mut cfg = resolve("tune", file.as_ref())?;
            apply_model(&mut cfg, model)?;
            cfg.output = output.or(cfg.output);
            cfg.check()?;
            commands::tune(&cfg)
        }
        Command::Weights {
            model,
            hyperparams,
            output,
            diagnostics,
        } => {
            let mut cfg = resolve("weights", file.as_ref())?;
            apply_model(&mut cfg, model)?;
            cfg.output = output.or(cfg.output);
            cfg.check()?;
            commands::weights(&cfg, hyperparams.as_deref(), diagnostics.as_deref())
        }
        Command::Estimate {
            model,
            hyperparams,
            weights,
            compare,
            output,
        } => {
            let mut cfg = resolve("estimate", file.as_ref())?;
            apply_model(&mut cfg, model)?;
            cfg.output = output.or(cfg.output);
            cfg.check()?;
            let compare = compare.as_deref().map(Comparison::parse_list).transpose()?.unwrap_or_default();
            commands::estimate(&cfg, hyperparams.as_deref(), weights.as_deref(), &compare)
        }
        Command::Simulate(args) => {
            let mut cfg = resolve("simulate", file.as_ref())?;
            if let Some(v) = args.alpha_grid {
                cfg.alpha_grid = v;
            }
            if let Some(v) = args.gamma_levels {
                cfg.gamma_levels = v;
            }
            if let Some(v) = args.n {
                cfg.n = v;
            }
            if let Some(v) = args.reps {
                cfg.reps = v;
            }
            if let Some(v) = args.methods {
                cfg.methods = parse_methods(&[v])?;
            }
            if let Some(v) = args.seed {
                cfg.seed = v;
            }
            if let Some(v) = args.lambda {
                cfg.lambda = v;
            }
            if let Some(v) = args.truncation {
                cfg.truncation = v;
            }
            if let Some(v) = args.max_iter {
                cfg.max_iter = v;
            }
            cfg.jobs = args.jobs.or(cfg.jobs).or_else(jobs_from_env);
            cfg.tune_once |= args.tune_once;
            cfg.output = args.output.or(cfg.output);
            cfg.check()?;
            match args.check {
                Some(Check::Consistency) => commands::check_consistency(&cfg, &args.n_grid),
                None => commands::simulate(&cfg),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
