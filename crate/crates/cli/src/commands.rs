use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::Path;

use kom_core::baselines::{fit_sampling_model, fit_treatment_propensity, ipw_weights, outcome_regression_estimate};
use kom_core::data::{fixed_target_weights, read_csv};
use kom_core::estimate::{effective_sample_size, estimate_report, EstimateReport};
use kom_core::gp_tune::{lambda_from, tune_arm, GpHyperparams, TuneOptions};
use kom_core::kernels::Whitening;
use kom_core::kom::{solve_kom, ArmHyperparams, KomOptions, KomWeights, LadderStep};
use kom_core::qp::SolverSettings;
use kom_core::simulation::{
    consistency_check, run_sweep, CellSummary, ConsistencyReport, Method, Scenario, SimulationConfig, SweepResult,
};
use kom_core::{Dataset, EstimandKind, EstimandSpec, KernelFamily, Normalization, TargetWeights};
use serde::{Deserialize, Serialize};

use crate::config::{LambdaArg, RunConfig, SCHEMA_VERSION};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Ipw,
    Overlap,
    Truncated,
    OutcomeRegression,
}

impl Comparison {
    pub const ALL: [Comparison; 4] = [Self::Ipw, Self::Overlap, Self::Truncated, Self::OutcomeRegression];

    pub fn parse_list(s: &str) -> Result<Vec<Self>, CliError> {
        let mut out = Vec::new();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name.to_ascii_lowercase().as_str() {
                "all" => out.extend(Self::ALL),
                "ipw" => out.push(Self::Ipw),
                "overlap" | "owate" => out.push(Self::Overlap),
                "truncated" | "osate" => out.push(Self::Truncated),
                "or" | "outcome" | "outcome-regression" => out.push(Self::OutcomeRegression),
                other => return Err(CliError::Usage(format!("unknown comparison method `{other}`"))),
            }
        }
        out.dedup();
        Ok(out)
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg.input.as_ref().ok_or_else(|| CliError::Usage("an input CSV is required (--input)".into()))?;
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file).map_err(CliError::data)
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(format!("json: {e}")))?;
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = io::stdout().lock();
            writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

fn solver_settings(cfg: &RunConfig) -> SolverSettings {
    SolverSettings {
        eps_primal: cfg.eps,
        eps_dual: cfg.eps,
        max_iter: cfg.max_iter,
        ..SolverSettings::default()
    }
}

/// The configured kernel first, then Mahalanobis polynomials of lower degree.
fn ladder(cfg: &RunConfig) -> Vec<LadderStep> {
    let mut steps = vec![LadderStep::new(cfg.family, cfg.degree)];
    let top = if cfg.family == KernelFamily::PolyMahalanobis { cfg.degree.saturating_sub(1) } else { 3 };
    steps.extend((1..=top).rev().map(|d| LadderStep::new(KernelFamily::PolyMahalanobis, d)));
    steps.dedup();
    steps
}

fn tune_options(cfg: &RunConfig) -> TuneOptions {
    TuneOptions {
        family: cfg.family,
        degree: cfg.degree,
        ..TuneOptions::default()
    }
}

fn tune_both(d: &Dataset, cfg: &RunConfig) -> Result<ArmHyperparams, CliError> {
    let whitening = Whitening::fit(d.x()).map_err(CliError::data)?;
    let opts = tune_options(cfg);
    Ok(ArmHyperparams {
        treated: tune_arm(d, &whitening, 1, &opts).map_err(CliError::tuning)?,
        control: tune_arm(d, &whitening, 0, &opts).map_err(CliError::tuning)?,
    })
}

#[derive(Debug, Serialize)]
struct ArmReport {
    #[serde(flatten)]
    hyper: GpHyperparams,
    lambda: f64,
}

#[derive(Debug, Serialize)]
struct TuneReport<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    treated: ArmReport,
    control: ArmReport,
}

#[derive(Debug, Deserialize)]
struct HyperFile {
    treated: GpHyperparams,
    control: GpHyperparams,
}

pub fn tune(cfg: &RunConfig) -> Result<(), CliError> {
    let d = load_data(cfg)?;
    let hyper = tune_both(&d, cfg)?;
    let arm = |h: GpHyperparams| ArmReport {
        lambda: lambda_from(&h, cfg.lambda_convention),
        hyper: h,
    };
    eprintln!(
        "log marginal likelihood: treated {:.6}, control {:.6}",
        hyper.treated.lml, hyper.control.lml
    );
    let report = TuneReport {
        schema_version: SCHEMA_VERSION,
        config: cfg,
        treated: arm(hyper.treated),
        control: arm(hyper.control),
    };
    write_json(&report, cfg.output.as_deref())
}

fn read_hyperparams(path: &Path) -> Result<ArmHyperparams, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let h: HyperFile = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(ArmHyperparams {
        treated: h.treated,
        control: h.control,
    })
}

/// Hyperparameters from a file, by tuning, or unit defaults when the
/// penalty does not need them.
fn hyperparams(d: &Dataset, cfg: &RunConfig, file: Option<&Path>) -> Result<ArmHyperparams, CliError> {
    match (file, cfg.lambda) {
        (Some(p), _) => read_hyperparams(p),
        (None, LambdaArg::GpTuned) => tune_both(d, cfg),
        (None, _) => Ok(ArmHyperparams::untuned(cfg.family, cfg.degree)),
    }
}

fn spec(cfg: &RunConfig) -> EstimandSpec {
    let mut s = EstimandSpec::new(cfg.estimand).with_alpha(cfg.truncation);
    s.subset_size = cfg.subset_size;
    s
}

fn propensity(d: &Dataset, cfg: &RunConfig, needed: bool) -> Result<Option<Vec<f64>>, CliError> {
    if !needed {
        return Ok(None);
    }
    fit_treatment_propensity(d, cfg.propensity_degree)
        .map(|(_, p)| Some(p))
        .map_err(CliError::data)
}

fn kom_weights(d: &Dataset, cfg: &RunConfig, hyper: &ArmHyperparams) -> Result<KomWeights, CliError> {
    let needs_phi = matches!(cfg.estimand, EstimandKind::Owate | EstimandKind::Osate);
    let phi = propensity(d, cfg, needs_phi)?;
    let opts = KomOptions {
        ladder: ladder(cfg),
        lambda: cfg.lambda.policy(cfg.lambda_convention),
        settings: solver_settings(cfg),
        ..KomOptions::default()
    };
    solve_kom(d, &spec(cfg), phi.as_deref(), hyper, &opts).map_err(CliError::solver)
}

#[derive(Debug, Serialize)]
struct WeightDiagnostics<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    estimand: EstimandKind,
    delta1_sq: f64,
    delta0_sq: f64,
    variance_penalty: f64,
    objective: f64,
    lambda1: f64,
    lambda0: f64,
    kernel: LadderStep,
    degree_used: u32,
    solver_status: String,
    solver_iterations: usize,
    primal_residual: f64,
    dual_residual: f64,
    polished: bool,
    relaxation_cmse: Option<f64>,
    jitter_used: f64,
    effective_sample_size_treated: f64,
    effective_sample_size_control: f64,
    attempts: &'a [kom_core::kom::LadderAttempt],
}

fn diagnostics<'a>(cfg: &'a RunConfig, k: &'a KomWeights, d: &Dataset) -> WeightDiagnostics<'a> {
    WeightDiagnostics {
        schema_version: SCHEMA_VERSION,
        config: cfg,
        estimand: k.estimand,
        delta1_sq: k.delta1_sq,
        delta0_sq: k.delta0_sq,
        variance_penalty: k.variance_penalty,
        objective: k.objective,
        lambda1: k.lambda1,
        lambda0: k.lambda0,
        kernel: k.kernel,
        degree_used: k.degree_used,
        solver_status: format!("{:?}", k.solver.status),
        solver_iterations: k.solver.iterations,
        primal_residual: k.solver.primal_residual,
        dual_residual: k.solver.dual_residual,
        polished: k.solver.polished,
        relaxation_cmse: k.solver.relaxation_cmse,
        jitter_used: KomOptions::default().gram_jitter,
        effective_sample_size_treated: effective_sample_size(&k.w, d, 1),
        effective_sample_size_control: effective_sample_size(&k.w, d, 0),
        attempts: &k.attempts,
    }
}

/// Target weights on the simplex scale.
fn simplex_target(k: &KomWeights) -> Result<Vec<f64>, CliError> {
    let t = TargetWeights::new(k.target.clone(), Normalization::UnitMean).map_err(CliError::data)?;
    Ok(t.simplex())
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightRow {
    id: String,
    w: f64,
    v: f64,
}

fn write_weights(path: Option<&Path>, d: &Dataset, w: &[f64], v: &[f64]) -> Result<(), CliError> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(File::create(p).map_err(|e| CliError::io(p, e))?),
        None => Box::new(io::stdout()),
    };
    let mut out = csv::Writer::from_writer(sink);
    for (i, id) in d.ids().iter().enumerate() {
        out.serialize(WeightRow {
            id: id.clone(),
            w: w[i],
            v: v[i],
        })
        .map_err(|e| CliError::Data(format!("csv: {e}")))?;
    }
    out.flush().map_err(|e| CliError::Data(format!("csv: {e}")))
}

pub fn weights(cfg: &RunConfig, hyper_file: Option<&Path>, diagnostics_path: Option<&Path>) -> Result<(), CliError> {
    let d = load_data(cfg)?;
    let hyper = hyperparams(&d, cfg, hyper_file)?;
    let k = kom_weights(&d, cfg, &hyper)?;
    write_weights(cfg.output.as_deref(), &d, &k.w, &simplex_target(&k)?)?;
    let diag = diagnostics(cfg, &k, &d);
    match diagnostics_path {
        Some(p) => write_json(&diag, Some(p)),
        None if cfg.output.is_some() => write_json(&diag, None),
        None => Ok(()),
    }
}

fn read_weights(path: &Path, d: &Dataset) -> Result<Vec<f64>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let index: HashMap<&str, usize> = d.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut w = vec![0.0; d.n()];
    let mut seen = vec![false; d.n()];
    for (row, rec) in rdr.deserialize::<WeightRow>().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("{} row {row}: {e}", path.display())))?;
        let &i = index
            .get(rec.id.as_str())
            .ok_or_else(|| CliError::Data(format!("{} row {row}: unknown id `{}`", path.display(), rec.id)))?;
        w[i] = rec.w;
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CliError::Data(format!("{}: no weight for id `{}`", path.display(), d.ids()[i])));
    }
    Ok(w)
}

fn comparison(d: &Dataset, cfg: &RunConfig, which: Comparison) -> Result<EstimateReport, CliError> {
    let fixed = if cfg.estimand.is_variable() { EstimandKind::Sate } else { cfg.estimand };
    let phi = propensity(d, cfg, true)?.expect("requested");
    match which {
        Comparison::Ipw | Comparison::Overlap | Comparison::Truncated => {
            let kind = match which {
                Comparison::Ipw => fixed,
                Comparison::Overlap => EstimandKind::Owate,
                _ => EstimandKind::Osate,
            };
            let psi = if kind == EstimandKind::Tate {
                Some(fit_sampling_model(d, cfg.propensity_degree).map_err(CliError::data)?.1)
            } else {
                None
            };
            let s = EstimandSpec::new(kind).with_alpha(cfg.truncation);
            let w = ipw_weights(&s, &phi, psi.as_deref(), d).map_err(CliError::data)?;
            let name = match which {
                Comparison::Ipw => "ipw",
                Comparison::Overlap => "overlap",
                _ => "truncated",
            };
            estimate_report(kind.label(), name, &w.w, d, None).map_err(CliError::data)
        }
        Comparison::OutcomeRegression => {
            let v = fixed_target_weights(&EstimandSpec::new(fixed).with_alpha(cfg.truncation), d, Some(&phi)).map_err(CliError::data)?;
            let fit = outcome_regression_estimate(d, cfg.outcome_degree, &v).map_err(CliError::data)?;
            let nan = f64::NAN;
            Ok(EstimateReport {
                estimand: fixed.label().to_string(),
                method: "outcome-regression".into(),
                tau_hat: fit.tau_hat,
                se_conditional: nan,
                se_naive: nan,
                se_sandwich: nan,
                ci_lower: nan,
                ci_upper: nan,
                n_effective_treated: nan,
                n_effective_control: nan,
            })
        }
    }
}

#[derive(Debug, Serialize)]
struct EstimateOutput<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    report: EstimateReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<WeightDiagnostics<'a>>,
    comparison: Vec<EstimateReport>,
}

pub fn estimate(cfg: &RunConfig, hyper_file: Option<&Path>, weights_file: Option<&Path>, compare: &[Comparison]) -> Result<(), CliError> {
    let d = load_data(cfg)?;
    let label = cfg.estimand.label();
    let kom;
    let (report, diag) = match weights_file {
        Some(p) => {
            let w = read_weights(p, &d)?;
            (estimate_report(label, "weights-file", &w, &d, None).map_err(CliError::data)?, None)
        }
        None => {
            let hyper = hyperparams(&d, cfg, hyper_file)?;
            kom = kom_weights(&d, cfg, &hyper)?;
            let sigma2 = (cfg.lambda == LambdaArg::GpTuned || hyper_file.is_some()).then_some((hyper.treated.sigma2, hyper.control.sigma2));
            let r = estimate_report(label, "kom", &kom.w, &d, sigma2).map_err(CliError::data)?;
            (r, Some(diagnostics(cfg, &kom, &d)))
        }
    };
    let comparison = compare
        .iter()
        .map(|&c| comparison(&d, cfg, c))
        .collect::<Result<Vec<_>, _>>()?;
    let out = EstimateOutput {
        schema_version: SCHEMA_VERSION,
        config: cfg,
        report,
        diagnostics: diag,
        comparison,
    };
    write_json(&out, cfg.output.as_deref())
}

fn simulation_config(cfg: &RunConfig) -> SimulationConfig {
    SimulationConfig {
        methods: cfg.methods.clone(),
        propensity_degree: cfg.propensity_degree,
        outcome_degree: cfg.outcome_degree,
        truncation: cfg.truncation,
        tune_once: cfg.tune_once,
        tune: tune_options(cfg),
        kom: KomOptions {
            ladder: ladder(cfg),
            lambda: cfg.lambda.policy(cfg.lambda_convention),
            settings: solver_settings(cfg),
            ..KomOptions::default()
        },
        jobs: cfg.jobs,
    }
}

fn scenarios(cfg: &RunConfig) -> Result<Vec<Scenario>, CliError> {
    let mut out = Vec::new();
    for &alpha in &cfg.alpha_grid {
        for &gamma in &cfg.gamma_levels {
            let s = Scenario::new(cfg.n, alpha, gamma).with_seed(cfg.seed).with_replicates(cfg.reps);
            s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("the alpha grid and gamma levels must be nonempty".into()));
    }
    Ok(out)
}

/// One CSV row per scenario and method; undefined metrics are left empty.
/// Runtimes are only in the JSON report so reruns give identical files.
#[derive(Debug, Serialize)]
struct SummaryRow {
    n: usize,
    alpha: f64,
    gamma: f64,
    method: Method,
    estimand: String,
    tau: f64,
    successes: usize,
    failures: usize,
    fallbacks: usize,
    bias: Option<f64>,
    abs_bias: Option<f64>,
    rmse: Option<f64>,
    empirical_se: Option<f64>,
    mean_se_conditional: Option<f64>,
    mean_se_naive: Option<f64>,
    mean_se_sandwich: Option<f64>,
    coverage_95: Option<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl From<&CellSummary> for SummaryRow {
    fn from(c: &CellSummary) -> Self {
        Self {
            n: c.scenario.n,
            alpha: c.scenario.alpha,
            gamma: c.scenario.gamma_mis,
            method: c.method,
            estimand: c.estimand.clone(),
            tau: c.tau,
            successes: c.successes,
            failures: c.failures,
            fallbacks: c.fallbacks,
            bias: finite(c.bias),
            abs_bias: finite(c.abs_bias),
            rmse: finite(c.rmse),
            empirical_se: finite(c.empirical_se),
            mean_se_conditional: finite(c.mean_se_conditional),
            mean_se_naive: finite(c.mean_se_naive),
            mean_se_sandwich: finite(c.mean_se_sandwich),
            coverage_95: finite(c.coverage_95),
        }
    }
}

#[derive(Debug, Serialize)]
struct LongRow {
    scenario: String,
    method: Method,
    metric: &'static str,
    value: f64,
}

fn long_rows(sweep: &SweepResult) -> Vec<LongRow> {
    let mut rows = Vec::new();
    for c in sweep.cells() {
        let scenario = format!("n={};alpha={};gamma={}", c.scenario.n, c.scenario.alpha, c.scenario.gamma_mis);
        let metrics = [
            ("bias", c.bias),
            ("abs_bias", c.abs_bias),
            ("rmse", c.rmse),
            ("empirical_se", c.empirical_se),
            ("mean_se_sandwich", c.mean_se_sandwich),
            ("coverage_95", c.coverage_95),
            ("failures", c.failures as f64),
        ];
        for (metric, value) in metrics.into_iter().filter(|(_, v)| v.is_finite()) {
            rows.push(LongRow {
                scenario: scenario.clone(),
                method: c.method,
                metric,
                value,
            });
        }
    }
    rows
}

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>, sink: Box<dyn Write>) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(sink);
    for r in rows {
        out.serialize(r).map_err(|e| CliError::Data(format!("csv: {e}")))?;
    }
    out.flush().map_err(|e| CliError::Data(format!("csv: {e}")))
}

#[derive(Debug, Serialize)]
struct SweepOutput<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    result: &'a SweepResult,
}

#[derive(Debug, Serialize)]
struct ConsistencyOutput<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    report: &'a ConsistencyReport,
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let sim = simulation_config(cfg);
    let sweep = run_sweep(&scenarios(cfg)?, &sim).map_err(|e| CliError::Simulation(e.to_string()))?;
    match &cfg.output {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            let open = |name: &str| -> Result<Box<dyn Write>, CliError> {
                let p = dir.join(name);
                Ok(Box::new(File::create(&p).map_err(|e| CliError::io(&p, e))?))
            };
            write_rows(sweep.cells().map(SummaryRow::from), open("summary.csv")?)?;
            write_rows(long_rows(&sweep), open("long.csv")?)?;
            write_json(
                &SweepOutput {
                    schema_version: SCHEMA_VERSION,
                    config: cfg,
                    result: &sweep,
                },
                Some(&dir.join("results.json")),
            )?;
        }
        None => write_rows(sweep.cells().map(SummaryRow::from), Box::new(io::stdout()))?,
    }
    let empty: Vec<String> = sweep
        .cells()
        .filter(|c| c.successes == 0)
        .map(|c| format!("{} at n={} alpha={} gamma={}", c.method, c.scenario.n, c.scenario.alpha, c.scenario.gamma_mis))
        .collect();
    if !empty.is_empty() {
        return Err(CliError::Simulation(format!("every replicate failed for {}", empty.join(", "))));
    }
    Ok(())
}

pub fn check_consistency(cfg: &RunConfig, n_grid: &[usize]) -> Result<(), CliError> {
    let alpha = cfg.alpha_grid.first().copied().unwrap_or(0.5);
    let gamma = cfg.gamma_levels.first().copied().unwrap_or(1.0);
    let method = cfg.methods.first().copied().unwrap_or(Method::KomSate);
    let base = Scenario::new(n_grid[0], alpha, gamma).with_seed(cfg.seed).with_replicates(cfg.reps);
    for &n in n_grid {
        Scenario { n, ..base }.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let report = consistency_check(n_grid, &base, method, &simulation_config(cfg)).map_err(|e| CliError::Simulation(e.to_string()))?;
    println!(
        "{method}: slope {:.4} against band [{}, {}]: {}",
        report.slope,
        report.band.0,
        report.band.1,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = &cfg.output {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_json(
            &ConsistencyOutput {
                schema_version: SCHEMA_VERSION,
                config: cfg,
                report: &report,
            },
            Some(&dir.join("consistency.json")),
        )?;
    }
    Ok(())
}
