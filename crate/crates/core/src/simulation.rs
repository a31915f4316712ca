//! Monte Carlo harness: the two-covariate data-generating process with
//! tunable positivity and misspecification, the method roster, and
//! bias/RMSE/coverage aggregation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_treatment_propensity, ipw_weights, logistic, outcome_regression_estimate};
use crate::data::{within_truncation, Dataset, EstimandKind, EstimandSpec, Normalization, TargetWeights};
use crate::error::{Error, Result};
use crate::estimate::{estimate_report, EstimateReport};
use crate::gp_tune::{tune_arm, TuneOptions};
use crate::kernels::Whitening;
use crate::kom::{solve_kom, ArmHyperparams, KomOptions};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n: usize,
    /// Positivity strength; larger values push propensities to 0 and 1.
    pub alpha: f64,
    /// Weight on the true covariates; 1 is a correct specification.
    pub gamma_mis: f64,
    pub delta: f64,
    pub seed: u64,
    pub replicates: usize,
}

impl Scenario {
    pub fn new(n: usize, alpha: f64, gamma_mis: f64) -> Self {
        Self {
            n,
            alpha,
            gamma_mis,
            delta: 4.0,
            seed: 20_190_423,
            replicates: 200,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_replicates(mut self, replicates: usize) -> Self {
        self.replicates = replicates;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(Error::InvalidConfig(format!("n = {} is below 20", self.n)));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.gamma_mis) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} and gamma {} must lie in [0, 1]",
                self.alpha, self.gamma_mis
            )));
        }
        if !self.delta.is_finite() || self.replicates == 0 {
            return Err(Error::InvalidConfig("delta must be finite and replicates positive".into()));
        }
        Ok(())
    }
}

/// One simulated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    /// Observed data; covariates already passed through `misspecify`.
    pub data: Dataset,
    pub x_true: DenseMatrix,
    pub pi: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// The effect is constant, so every target weighting gives `delta`.
    pub tau: f64,
}

pub fn true_propensity(x1: f64, x2: f64, alpha: f64) -> f64 {
    logistic(alpha * (-1.5 + 1.5 * x1 + 1.5 * x2))
}

/// `(γX₁ + (1−γ)X₂e^{−X₁}, γX₂ + (1−γ)log|X₂|)`.
pub fn misspecify(x: &DenseMatrix, gamma: f64) -> DenseMatrix {
    let mut z = DenseMatrix::zeros(x.rows(), 2);
    for i in 0..x.rows() {
        let (x1, x2) = (x[(i, 0)], x[(i, 1)]);
        let z1 = x2 / x1.exp();
        let z2 = x2.abs().max(1e-300).ln();
        z[(i, 0)] = gamma * x1 + (1.0 - gamma) * z1;
        z[(i, 1)] = gamma * x2 + (1.0 - gamma) * z2;
    }
    z
}

/// Random stream of replicate `r`: the scenario seed with stream id `r`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

pub fn generate(s: &Scenario, replicate: u64) -> Result<Draw> {
    s.validate()?;
    let mut rng = replicate_rng(s.seed, replicate);
    let n = s.n;
    let mut x = DenseMatrix::zeros(n, 2);
    for i in 0..n {
        for k in 0..2 {
            x[(i, k)] = 0.5 + rng.sample::<f64, _>(StandardNormal);
        }
    }
    let pi: Vec<f64> = (0..n).map(|i| true_propensity(x[(i, 0)], x[(i, 1)], s.alpha)).collect();
    let mut t: Vec<f64> = pi.iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
    // the dataset contract needs both arms
    if t.iter().all(|&v| v == 1.0) {
        t[0] = 0.0;
    } else if t.iter().all(|&v| v == 0.0) {
        t[0] = 1.0;
    }
    let y0: Vec<f64> = (0..n)
        .map(|i| 3.0 * (x[(i, 0)] + x[(i, 1)]) + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let y1: Vec<f64> = y0.iter().map(|v| v + s.delta).collect();
    let y = (0..n).map(|i| Some(if t[i] == 1.0 { y1[i] } else { y0[i] })).collect();
    let observed = misspecify(&x, s.gamma_mis);
    let ids = (0..n).map(|i| format!("u{i}")).collect();
    let data = Dataset::new(ids, observed, &t, &vec![1.0; n], y)?;
    Ok(Draw {
        data,
        x_true: x,
        pi,
        y0,
        y1,
        tau: s.delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    KomSate,
    KomKowate,
    KomKosate,
    IpwSate,
    OsateTruncated,
    OwateOverlap,
    OutcomeRegression,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::KomSate,
        Method::KomKowate,
        Method::KomKosate,
        Method::IpwSate,
        Method::OsateTruncated,
        Method::OwateOverlap,
        Method::OutcomeRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::KomSate => "kom-sate",
            Self::KomKowate => "kom-kowate",
            Self::KomKosate => "kom-kosate",
            Self::IpwSate => "ipw-sate",
            Self::OsateTruncated => "osate-truncated",
            Self::OwateOverlap => "owate-overlap",
            Self::OutcomeRegression => "outcome-regression",
        }
    }

    pub fn estimand(self) -> EstimandKind {
        match self {
            Self::KomSate | Self::IpwSate | Self::OutcomeRegression => EstimandKind::Sate,
            Self::KomKowate => EstimandKind::Kowate,
            Self::KomKosate => EstimandKind::Kosate,
            Self::OsateTruncated => EstimandKind::Osate,
            Self::OwateOverlap => EstimandKind::Owate,
        }
    }

    pub fn is_kom(self) -> bool {
        matches!(self, Self::KomSate | Self::KomKowate | Self::KomKosate)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .or(match key.as_str() {
                "kom" => Some(Self::KomSate),
                "ipw" => Some(Self::IpwSate),
                "truncated" | "osate" => Some(Self::OsateTruncated),
                "overlap" | "owate" => Some(Self::OwateOverlap),
                "or" | "outcome" => Some(Self::OutcomeRegression),
                "kowate" => Some(Self::KomKowate),
                "kosate" => Some(Self::KomKosate),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub methods: Vec<Method>,
    pub propensity_degree: u32,
    pub outcome_degree: u32,
    /// Truncation level for the truncated estimand and the KOSATE subset size.
    pub truncation: f64,
    /// Tune hyperparameters on replicate 0 and reuse them.
    pub tune_once: bool,
    pub tune: TuneOptions,
    pub kom: KomOptions,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            propensity_degree: 4,
            outcome_degree: 4,
            truncation: 0.1,
            tune_once: false,
            tune: TuneOptions::default(),
            kom: KomOptions::default(),
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub tau_hat: Option<f64>,
    pub se_conditional: Option<f64>,
    pub se_naive: Option<f64>,
    pub se_sandwich: Option<f64>,
    pub covered: Option<bool>,
    /// Ladder rung that produced KOM weights, 0 for the first.
    pub ladder_index: Option<usize>,
    pub failure: Option<String>,
    pub runtime_secs: f64,
}

/// Fitted-propensity and true-propensity ranges of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityRange {
    pub true_min: f64,
    pub true_max: f64,
    pub fitted_min: f64,
    pub fitted_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: Scenario,
    pub method: Method,
    pub estimand: String,
    pub tau: f64,
    pub successes: usize,
    pub failures: usize,
    /// KOM fits that needed a lower rung of the ladder.
    pub fallbacks: usize,
    pub bias: f64,
    pub abs_bias: f64,
    pub rmse: f64,
    pub empirical_se: f64,
    pub mean_se_conditional: f64,
    pub mean_se_naive: f64,
    pub mean_se_sandwich: f64,
    pub coverage_95: f64,
    pub mean_runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub cells: Vec<CellSummary>,
    pub records: Vec<ReplicateRecord>,
    pub propensity_ranges: Vec<PropensityRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub scenarios: Vec<ScenarioResult>,
}

impl SweepResult {
    pub fn cells(&self) -> impl Iterator<Item = &CellSummary> {
        self.scenarios.iter().flat_map(|s| s.cells.iter())
    }
}

fn record_from(replicate: usize, method: Method, tau: f64, report: &EstimateReport, ladder_index: Option<usize>, start: Instant) -> ReplicateRecord {
    ReplicateRecord {
        replicate,
        method,
        tau_hat: Some(report.tau_hat),
        se_conditional: Some(report.se_conditional),
        se_naive: Some(report.se_naive),
        se_sandwich: Some(report.se_sandwich),
        covered: Some(report.ci_lower <= tau && tau <= report.ci_upper),
        ladder_index,
        failure: None,
        runtime_secs: start.elapsed().as_secs_f64(),
    }
}

fn failed(replicate: usize, method: Method, err: &Error, start: Instant) -> ReplicateRecord {
    ReplicateRecord {
        replicate,
        method,
        tau_hat: None,
        se_conditional: None,
        se_naive: None,
        se_sandwich: None,
        covered: None,
        ladder_index: None,
        failure: Some(err.to_string()),
        runtime_secs: start.elapsed().as_secs_f64(),
    }
}

fn tune_both(d: &Dataset, opts: &TuneOptions) -> Result<ArmHyperparams> {
    let whitening = Whitening::fit(d.x())?;
    Ok(ArmHyperparams {
        treated: tune_arm(d, &whitening, 1, opts)?,
        control: tune_arm(d, &whitening, 0, opts)?,
    })
}

fn run_method(
    method: Method,
    draw: &Draw,
    phi: &[f64],
    hyper: Option<&ArmHyperparams>,
    cfg: &SimulationConfig,
    replicate: usize,
) -> ReplicateRecord {
    let start = Instant::now();
    let d = &draw.data;
    let label = method.estimand().label();
    let outcome = (|| -> Result<(EstimateReport, Option<usize>)> {
        match method {
            Method::KomSate | Method::KomKowate | Method::KomKosate => {
                let hyper = hyper.ok_or_else(|| Error::InvalidConfig("KOM needs hyperparameters".into()))?;
                let mut spec = EstimandSpec::new(method.estimand());
                if method == Method::KomKosate {
                    let size = phi.iter().filter(|&&p| within_truncation(p, cfg.truncation)).count();
                    if size == 0 {
                        return Err(Error::EmptyTarget("no fitted propensity inside the truncation band".into()));
                    }
                    spec = spec.with_subset_size(size);
                }
                let kom = solve_kom(d, &spec, Some(phi), hyper, &cfg.kom)?;
                let rung = cfg.kom.ladder.iter().position(|s| *s == kom.kernel);
                let sigma2 = (hyper.treated.sigma2, hyper.control.sigma2);
                let report = estimate_report(label, method.name(), &kom.w, d, Some(sigma2))?;
                Ok((report, rung))
            }
            Method::IpwSate | Method::OsateTruncated | Method::OwateOverlap => {
                let spec = EstimandSpec::new(method.estimand()).with_alpha(cfg.truncation);
                let w = ipw_weights(&spec, phi, None, d)?;
                Ok((estimate_report(label, method.name(), &w.w, d, None)?, None))
            }
            Method::OutcomeRegression => {
                let v = TargetWeights::new(vec![1.0; d.n()], Normalization::UnitMean)?;
                let fit = outcome_regression_estimate(d, cfg.outcome_degree, &v)?;
                let nan = f64::NAN;
                Ok((
                    EstimateReport {
                        estimand: label.to_string(),
                        method: method.name().to_string(),
                        tau_hat: fit.tau_hat,
                        se_conditional: nan,
                        se_naive: nan,
                        se_sandwich: nan,
                        ci_lower: nan,
                        ci_upper: nan,
                        n_effective_treated: nan,
                        n_effective_control: nan,
                    },
                    None,
                ))
            }
        }
    })();
    match outcome {
        Ok((report, rung)) => {
            let mut rec = record_from(replicate, method, draw.tau, &report, rung, start);
            if method == Method::OutcomeRegression {
                rec.se_conditional = None;
                rec.se_naive = None;
                rec.se_sandwich = None;
                rec.covered = None;
            }
            rec
        }
        Err(e) => failed(replicate, method, &e, start),
    }
}

struct ReplicateOutput {
    records: Vec<ReplicateRecord>,
    range: Option<PropensityRange>,
}

fn run_replicate(s: &Scenario, r: usize, cfg: &SimulationConfig, shared: Option<&ArmHyperparams>) -> ReplicateOutput {
    let draw = match generate(s, r as u64) {
        Ok(d) => d,
        Err(e) => {
            let now = Instant::now();
            return ReplicateOutput {
                records: cfg.methods.iter().map(|&m| failed(r, m, &e, now)).collect(),
                range: None,
            };
        }
    };
    let needs_phi = cfg.methods.iter().any(|m| !matches!(m, Method::KomSate | Method::KomKowate | Method::OutcomeRegression));
    let phi = if needs_phi {
        fit_treatment_propensity(&draw.data, cfg.propensity_degree).map(|(_, p)| p)
    } else {
        Ok(vec![0.5; s.n])
    };
    let phi = match phi {
        Ok(p) => p,
        Err(e) => {
            let now = Instant::now();
            return ReplicateOutput {
                records: cfg.methods.iter().map(|&m| failed(r, m, &e, now)).collect(),
                range: None,
            };
        }
    };
    let range = needs_phi.then(|| {
        let (tmin, tmax) = min_max(&draw.pi);
        let (fmin, fmax) = min_max(&phi);
        PropensityRange {
            true_min: tmin,
            true_max: tmax,
            fitted_min: fmin,
            fitted_max: fmax,
        }
    });
    let own;
    let hyper = if cfg.methods.iter().any(|m| m.is_kom()) {
        match shared {
            Some(h) => Ok(h),
            None => match tune_both(&draw.data, &cfg.tune) {
                Ok(h) => {
                    own = h;
                    Ok(&own)
                }
                Err(e) => Err(e),
            },
        }
    } else {
        Err(Error::InvalidConfig("no KOM method requested".into()))
    };
    let records = cfg
        .methods
        .iter()
        .map(|&m| match (&hyper, m.is_kom()) {
            (Err(e), true) => failed(r, m, e, Instant::now()),
            (h, _) => run_method(m, &draw, &phi, h.as_ref().ok().copied(), cfg, r),
        })
        .collect();
    ReplicateOutput { records, range }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Bias, RMSE, spread and coverage over the successful replicates.
pub fn summarize(s: &Scenario, method: Method, tau: f64, records: &[&ReplicateRecord]) -> CellSummary {
    let estimates: Vec<f64> = records.iter().filter_map(|r| r.tau_hat).collect();
    let r = estimates.len() as f64;
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let avg = mean(&estimates);
    let bias = avg - tau;
    let rmse = (estimates.iter().map(|e| (e - tau).powi(2)).sum::<f64>() / r).sqrt();
    let empirical_se = if estimates.len() > 1 {
        (estimates.iter().map(|e| (e - avg).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
    } else {
        0.0
    };
    let collect = |f: fn(&ReplicateRecord) -> Option<f64>| -> Vec<f64> { records.iter().filter_map(|r| f(r)).collect() };
    let covered: Vec<f64> = records
        .iter()
        .filter_map(|r| r.covered.map(|c| if c { 1.0 } else { 0.0 }))
        .collect();
    let runtimes: Vec<f64> = records.iter().map(|r| r.runtime_secs).collect();
    CellSummary {
        scenario: *s,
        method,
        estimand: method.estimand().label().to_string(),
        tau,
        successes: estimates.len(),
        failures: records.len() - estimates.len(),
        fallbacks: records.iter().filter(|r| r.ladder_index.is_some_and(|i| i > 0)).count(),
        bias,
        abs_bias: bias.abs(),
        rmse,
        empirical_se,
        mean_se_conditional: mean(&collect(|r| r.se_conditional)),
        mean_se_naive: mean(&collect(|r| r.se_naive)),
        mean_se_sandwich: mean(&collect(|r| r.se_sandwich)),
        coverage_95: mean(&covered),
        mean_runtime_secs: mean(&runtimes),
    }
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Runs every replicate of one scenario. Results do not depend on the
/// number of workers.
pub fn run_scenario(s: &Scenario, cfg: &SimulationConfig) -> Result<ScenarioResult> {
    s.validate()?;
    if cfg.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    let shared = if cfg.tune_once && cfg.methods.iter().any(|m| m.is_kom()) {
        Some(tune_both(&generate(s, 0)?.data, &cfg.tune)?)
    } else {
        None
    };
    let outputs: Vec<ReplicateOutput> = in_pool(cfg.jobs, || {
        (0..s.replicates)
            .into_par_iter()
            .map(|r| run_replicate(s, r, cfg, shared.as_ref()))
            .collect()
    })?;
    let mut records = Vec::with_capacity(outputs.len() * cfg.methods.len());
    let mut ranges = Vec::new();
    for out in outputs {
        records.extend(out.records);
        ranges.extend(out.range);
    }
    let cells = cfg
        .methods
        .iter()
        .map(|&m| {
            let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == m).collect();
            summarize(s, m, s.delta, &mine)
        })
        .collect();
    Ok(ScenarioResult {
        scenario: *s,
        cells,
        records,
        propensity_ranges: ranges,
    })
}

pub fn run_sweep(scenarios: &[Scenario], cfg: &SimulationConfig) -> Result<SweepResult> {
    let scenarios = scenarios
        .iter()
        .map(|s| run_scenario(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { scenarios })
}

/// Mean of the per-replicate minimum and maximum of the true propensity.
pub fn true_propensity_range(s: &Scenario) -> Result<(f64, f64)> {
    let mut lo = 0.0;
    let mut hi = 0.0;
    for r in 0..s.replicates {
        let (a, b) = min_max(&generate(s, r as u64)?.pi);
        lo += a;
        hi += b;
    }
    let k = s.replicates as f64;
    Ok((lo / k, hi / k))
}

/// Ten positivity levels from 0.1 to 1.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

/// Correct, moderate and strong misspecification.
pub fn default_gamma_levels() -> Vec<f64> {
    vec![1.0, 0.5, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub method: Method,
    pub n_grid: Vec<usize>,
    pub rmse: Vec<f64>,
    pub slope: f64,
    pub band: (f64, f64),
    pub passed: bool,
}

/// Least-squares slope of `ys` on `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Slope of log RMSE against log n for one method.
pub fn consistency_check(n_grid: &[usize], base: &Scenario, method: Method, cfg: &SimulationConfig) -> Result<ConsistencyReport> {
    if n_grid.len() < 2 {
        return Err(Error::InvalidConfig("the n grid needs at least two sizes".into()));
    }
    let cfg = SimulationConfig {
        methods: vec![method],
        ..cfg.clone()
    };
    let mut rmse = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let s = Scenario { n, ..*base };
        let res = run_scenario(&s, &cfg)?;
        let cell = &res.cells[0];
        if cell.successes == 0 {
            return Err(Error::InvalidConfig(format!("every replicate failed at n = {n}")));
        }
        rmse.push(cell.rmse);
    }
    let xs: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = rmse.iter().map(|r| r.ln()).collect();
    let slope = ls_slope(&xs, &ys);
    let band = (-0.65, -0.35);
    Ok(ConsistencyReport {
        method,
        n_grid: n_grid.to_vec(),
        rmse,
        slope,
        band,
        passed: band.0 <= slope && slope <= band.1,
    })
}
