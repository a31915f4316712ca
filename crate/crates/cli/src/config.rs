//! Run configuration: flags override the config file, which overrides the
//! built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kom_core::gp_tune::LambdaConvention;
use kom_core::kom::LambdaPolicy;
use kom_core::simulation::Method;
use kom_core::{EstimandKind, KernelFamily};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Variance-penalty policy as written on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaArg {
    GpTuned,
    Zero,
    Fixed(f64),
}

impl LambdaArg {
    pub fn policy(self, convention: LambdaConvention) -> LambdaPolicy {
        match self {
            Self::GpTuned => LambdaPolicy::GpTuned(convention),
            Self::Zero => LambdaPolicy::Zero,
            Self::Fixed(v) => LambdaPolicy::Fixed(v),
        }
    }
}

impl FromStr for LambdaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gp-tuned" | "gp_tuned" | "tuned" => Ok(Self::GpTuned),
            "zero" | "0" => Ok(Self::Zero),
            other => match other.strip_prefix("fixed:").unwrap_or(other).parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => Ok(Self::Fixed(v)),
                _ => Err(format!("expected `gp-tuned`, `zero` or a nonnegative number, got `{s}`")),
            },
        }
    }
}

/// Settings a config file may provide. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub estimand: Option<String>,
    pub family: Option<String>,
    pub degree: Option<u32>,
    pub lambda: Option<String>,
    pub lambda_convention: Option<String>,
    pub subset_size: Option<usize>,
    pub truncation: Option<f64>,
    pub propensity_degree: Option<u32>,
    pub outcome_degree: Option<u32>,
    pub eps: Option<f64>,
    pub max_iter: Option<usize>,
    pub alpha_grid: Option<Vec<f64>>,
    pub gamma_levels: Option<Vec<f64>>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub jobs: Option<usize>,
    pub tune_once: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Fully resolved settings, echoed into every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub estimand: EstimandKind,
    pub family: KernelFamily,
    pub degree: u32,
    pub lambda: LambdaArg,
    pub lambda_convention: LambdaConvention,
    pub subset_size: Option<usize>,
    pub truncation: f64,
    pub propensity_degree: u32,
    pub outcome_degree: u32,
    pub eps: f64,
    pub max_iter: usize,
    pub alpha_grid: Vec<f64>,
    pub gamma_levels: Vec<f64>,
    pub n: usize,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub jobs: Option<usize>,
    pub tune_once: bool,
}

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        Self {
            command: command.to_string(),
            input: None,
            output: None,
            seed: 20_190_423,
            estimand: EstimandKind::Sate,
            family: KernelFamily::ProductPoly,
            degree: 2,
            lambda: LambdaArg::GpTuned,
            lambda_convention: LambdaConvention::Printed,
            subset_size: None,
            truncation: 0.1,
            propensity_degree: 4,
            outcome_degree: 4,
            eps: 1e-6,
            max_iter: 100_000,
            alpha_grid: kom_core::simulation::default_alpha_grid(),
            gamma_levels: kom_core::simulation::default_gamma_levels(),
            n: 400,
            reps: 200,
            methods: Method::ALL.to_vec(),
            jobs: None,
            tune_once: false,
        }
    }

    /// Layers `file` over the defaults.
    pub fn with_file(mut self, file: &FileConfig) -> Result<Self, CliError> {
        let usage = |e: String| CliError::Usage(e);
        if let Some(v) = &file.input {
            self.input = Some(v.clone());
        }
        if let Some(v) = &file.output {
            self.output = Some(v.clone());
        }
        if let Some(v) = file.seed {
            self.seed = v;
        }
        if let Some(v) = &file.estimand {
            self.estimand = v.parse().map_err(|e: kom_core::Error| usage(e.to_string()))?;
        }
        if let Some(v) = &file.family {
            self.family = v.parse().map_err(|e: kom_core::Error| usage(e.to_string()))?;
        }
        if let Some(v) = file.degree {
            self.degree = v;
        }
        if let Some(v) = &file.lambda {
            self.lambda = v.parse().map_err(usage)?;
        }
        if let Some(v) = &file.lambda_convention {
            self.lambda_convention = v.parse().map_err(|e: kom_core::Error| usage(e.to_string()))?;
        }
        if file.subset_size.is_some() {
            self.subset_size = file.subset_size;
        }
        if let Some(v) = file.truncation {
            self.truncation = v;
        }
        if let Some(v) = file.propensity_degree {
            self.propensity_degree = v;
        }
        if let Some(v) = file.outcome_degree {
            self.outcome_degree = v;
        }
        if let Some(v) = file.eps {
            self.eps = v;
        }
        if let Some(v) = file.max_iter {
            self.max_iter = v;
        }
        if let Some(v) = &file.alpha_grid {
            self.alpha_grid = v.clone();
        }
        if let Some(v) = &file.gamma_levels {
            self.gamma_levels = v.clone();
        }
        if let Some(v) = file.n {
            self.n = v;
        }
        if let Some(v) = file.reps {
            self.reps = v;
        }
        if let Some(v) = &file.methods {
            self.methods = parse_methods(v)?;
        }
        if file.jobs.is_some() {
            self.jobs = file.jobs;
        }
        if let Some(v) = file.tune_once {
            self.tune_once = v;
        }
        Ok(self)
    }

    pub fn check(&self) -> Result<(), CliError> {
        if let (Some(i), Some(o)) = (&self.input, &self.output) {
            if i == o {
                return Err(CliError::Usage(format!("input and output are the same path {}", i.display())));
            }
        }
        if !(self.eps > 0.0) || self.max_iter == 0 {
            return Err(CliError::Usage("solver tolerance and iteration limit must be positive".into()));
        }
        if self.jobs == Some(0) {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn parse_methods(names: &[String]) -> Result<Vec<Method>, CliError> {
    let mut out = Vec::new();
    for name in names.iter().flat_map(|n| n.split(',')).map(str::trim).filter(|n| !n.is_empty()) {
        if name.eq_ignore_ascii_case("all") {
            out.extend(Method::ALL);
            continue;
        }
        out.push(name.parse().map_err(|e: kom_core::Error| CliError::Usage(e.to_string()))?);
    }
    out.dedup();
    if out.is_empty() {
        return Err(CliError::Usage("no methods given".into()));
    }
    Ok(out)
}

/// Default worker count from the environment.
pub fn jobs_from_env() -> Option<usize> {
    std::env::var("KOM_JOBS").ok().and_then(|v| v.trim().parse().ok())
}
