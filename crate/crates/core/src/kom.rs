//! Kernel optimal matching: worst-case balance diagnostics, the fixed and
//! variable target-weight programs, and the kernel fallback ladder.
//!
//! Conventions: `n` counts every unit, target weights `V` sum to `n`, and each
//! treatment arm of `W` sums to `n`. Reported quadratic forms carry the `1/n²`
//! prefactor; the quadratic programs are rescaled by a recorded factor.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{fixed_target_weights, Dataset, EstimandKind, EstimandSpec, Normalization, TargetWeights};
use crate::error::{Error, Result};
use crate::gp_tune::{lambda_from, GpHyperparams, LambdaConvention};
use crate::kernels::{psd_check, KernelConfig, KernelFamily, Whitening};
use crate::linalg::{dot, DenseMatrix};
use crate::qp::{solve, solve_relax_and_round, BinaryBlock, QpSolution, QpStatus, QuadraticProgram, SolverSettings};

/// Squared worst-case discrepancy of arm `arm` over the unit ball of the
/// kernel's RKHS: `(1/n²)(I_S I_t W − V)ᵀ K (I_S I_t W − V)`.
pub fn worst_case_discrepancy_sq(
    w: &[f64],
    v: &[f64],
    k: &DenseMatrix,
    in_study: &[bool],
    treated: &[bool],
    arm: u8,
) -> Result<f64> {
    let n = w.len();
    if v.len() != n || in_study.len() != n || treated.len() != n || k.rows() != n || k.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "discrepancy with |W|={n}, |V|={}, K {}x{}, |S|={}, |T|={}",
            v.len(),
            k.rows(),
            k.cols(),
            in_study.len(),
            treated.len()
        )));
    }
    let diff: Vec<f64> = (0..n)
        .map(|i| {
            let own = if in_study[i] && treated[i] == (arm == 1) { w[i] } else { 0.0 };
            own - v[i]
        })
        .collect();
    let kd = k.matvec(&diff)?;
    Ok(dot(&diff, &kd) / (n as f64 * n as f64))
}

/// Variance penalty weights: one scalar per arm, or one per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    PerArm { lambda1: f64, lambda0: f64 },
    PerUnit(Vec<f64>),
}

impl Penalty {
    pub fn per_arm(lambda1: f64, lambda0: f64) -> Self {
        Self::PerArm { lambda1, lambda0 }
    }

    fn weight(&self, i: usize, treated: bool) -> f64 {
        match self {
            Self::PerArm { lambda1, lambda0 } => {
                if treated {
                    *lambda1
                } else {
                    *lambda0
                }
            }
            Self::PerUnit(v) => v[i],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let ok = match self {
            Self::PerArm { lambda1, lambda0 } => *lambda1 >= 0.0 && *lambda0 >= 0.0 && lambda1.is_finite() && lambda0.is_finite(),
            Self::PerUnit(v) => {
                if v.len() != n {
                    return Err(Error::DimensionMismatch(format!("{} penalty weights for {n} units", v.len())));
                }
                v.iter().all(|x| *x >= 0.0 && x.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("penalty weights must be finite and nonnegative".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmseBreakdown {
    pub total: f64,
    pub delta1_sq: f64,
    pub delta0_sq: f64,
    pub penalty: f64,
}

/// `Δ₁² + Δ₀² + (1/n²) Σ_{i∈S} Λ_i W_i²`.
pub fn worst_case_cmse(
    w: &[f64],
    v: &[f64],
    k1: &DenseMatrix,
    k0: &DenseMatrix,
    penalty: &Penalty,
    in_study: &[bool],
    treated: &[bool],
) -> Result<CmseBreakdown> {
    let n = w.len();
    penalty.validate(n)?;
    let delta1_sq = worst_case_discrepancy_sq(w, v, k1, in_study, treated, 1)?;
    let delta0_sq = worst_case_discrepancy_sq(w, v, k0, in_study, treated, 0)?;
    let pen = (0..n)
        .filter(|&i| in_study[i])
        .map(|i| penalty.weight(i, treated[i]) * w[i] * w[i])
        .sum::<f64>()
        / (n as f64 * n as f64);
    Ok(CmseBreakdown {
        total: delta1_sq + delta0_sq + pen,
        delta1_sq,
        delta0_sq,
        penalty: pen,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KomMode {
    FixedV,
    Kowate,
    Kosate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KomProblem {
    pub k1: DenseMatrix,
    pub k0: DenseMatrix,
    pub treated: Vec<bool>,
    pub in_study: Vec<bool>,
    pub penalty: Penalty,
    pub mode: KomMode,
    /// Required in fixed mode.
    pub target: Option<TargetWeights>,
    /// Number of selected units in KOSATE mode.
    pub subset_size: Option<usize>,
    /// Optional `(ρ/n²)‖V‖²` stabilizer for the joint problems.
    pub v_penalty: f64,
    /// Added to the diagonal of both Grams inside the program.
    pub gram_jitter: f64,
}

/// Default diagonal inflation of the Grams in the KOM programs.
pub const GRAM_JITTER: f64 = 1e-8;

impl KomProblem {
    pub fn fixed(
        k1: DenseMatrix,
        k0: DenseMatrix,
        treated: Vec<bool>,
        in_study: Vec<bool>,
        penalty: Penalty,
        target: TargetWeights,
    ) -> Self {
        Self {
            k1,
            k0,
            treated,
            in_study,
            penalty,
            mode: KomMode::FixedV,
            target: Some(target),
            subset_size: None,
            v_penalty: 0.0,
            gram_jitter: GRAM_JITTER,
        }
    }

    pub fn variable(
        k1: DenseMatrix,
        k0: DenseMatrix,
        treated: Vec<bool>,
        in_study: Vec<bool>,
        penalty: Penalty,
        mode: KomMode,
        subset_size: Option<usize>,
    ) -> Self {
        Self {
            k1,
            k0,
            treated,
            in_study,
            penalty,
            mode,
            target: None,
            subset_size,
            v_penalty: 0.0,
            gram_jitter: GRAM_JITTER,
        }
    }

    pub fn n(&self) -> usize {
        self.treated.len()
    }

    fn arm(&self, i: usize) -> Option<u8> {
        self.in_study[i].then_some(self.treated[i] as u8)
    }

    fn gram(&self, arm: u8) -> &DenseMatrix {
        if arm == 1 {
            &self.k1
        } else {
            &self.k0
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        for k in [&self.k1, &self.k0] {
            if k.rows() != n || k.cols() != n {
                return Err(Error::DimensionMismatch(format!("gram {}x{} for {n} units", k.rows(), k.cols())));
            }
        }
        if self.in_study.len() != n {
            return Err(Error::DimensionMismatch("study indicator length".into()));
        }
        self.penalty.validate(n)?;
        if !(self.gram_jitter >= 0.0 && self.gram_jitter.is_finite()) {
            return Err(Error::InvalidConfig("the Gram jitter must be finite and nonnegative".into()));
        }
        if !(self.v_penalty >= 0.0) {
            return Err(Error::InvalidConfig("the V stabilizer must be nonnegative".into()));
        }
        if !(0..n).any(|i| self.arm(i) == Some(1)) {
            return Err(Error::EmptyArm { arm: "treated" });
        }
        if !(0..n).any(|i| self.arm(i) == Some(0)) {
            return Err(Error::EmptyArm { arm: "control" });
        }
        Ok(())
    }

    /// Mean study diagonal of the arm Grams, the reference scale of the QP.
    fn kernel_scale(&self) -> f64 {
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..self.n() {
            if let Some(t) = self.arm(i) {
                sum += self.gram(t)[(i, i)].abs();
                count += 1;
            }
        }
        let s = sum / count.max(1) as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    }

    fn arm_rows(&self, cols: usize) -> (DenseMatrix, Vec<f64>) {
        let n = self.n();
        let mut a = DenseMatrix::zeros(2, cols);
        for i in 0..n {
            match self.arm(i) {
                Some(1) => a[(0, i)] = 1.0,
                Some(_) => a[(1, i)] = 1.0,
                None => {}
            }
        }
        (a, vec![n as f64; 2])
    }

    /// `Σ_t I_S I_t (K_t + εI + Λ) I_t I_S` into the leading block of `p`, times 2.
    fn fill_w_block(&self, p: &mut DenseMatrix) {
        let n = self.n();
        for i in 0..n {
            let Some(ti) = self.arm(i) else { continue };
            let k = self.gram(ti);
            for j in 0..n {
                if self.arm(j) == Some(ti) {
                    p[(i, j)] = 2.0 * k[(i, j)];
                }
            }
            p[(i, i)] += 2.0 * (self.gram_jitter + self.penalty.weight(i, self.treated[i]));
        }
    }
}

/// A KOM program with the bookkeeping needed to map its objective back to
/// worst-case CMSE units.
#[derive(Debug, Clone, PartialEq)]
pub struct KomQp {
    pub qp: QuadraticProgram,
    pub mode: KomMode,
    pub n: usize,
    /// Positive factor multiplying the raw objective `n²·CMSE − constant`.
    pub scale: f64,
    /// `Σ_t VᵀK_tV`, dropped from the fixed-target objective.
    pub constant: f64,
}

impl KomQp {
    /// Worst-case CMSE implied by a QP objective value.
    pub fn cmse_from_objective(&self, objective: f64) -> f64 {
        let n2 = (self.n * self.n) as f64;
        (objective / self.scale + self.constant) / n2
    }

    fn finish(mut qp: QuadraticProgram, mode: KomMode, n: usize, kscale: f64, constant: f64) -> Self {
        // gradients of order one keep the absolute floors of the stopping rules inert
        let scale = 1.0 / (kscale * n as f64);
        qp.p.scale(scale);
        qp.q.iter_mut().for_each(|v| *v *= scale);
        qp.p.symmetrize();
        Self {
            qp,
            mode,
            n,
            scale,
            constant,
        }
    }
}

/// Fixed-target program in `W`.
pub fn build_fixed_v_qp(problem: &KomProblem) -> Result<KomQp> {
    problem.validate()?;
    if problem.mode != KomMode::FixedV {
        return Err(Error::InvalidConfig("fixed-target program requested for a joint mode".into()));
    }
    let n = problem.n();
    let target = problem
        .target
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("fixed mode needs target weights".into()))?;
    if target.len() != n {
        return Err(Error::DimensionMismatch(format!("{} target weights for {n} units", target.len())));
    }
    let v = target.unit_mean();
    let eps = problem.gram_jitter;
    let mut k1v = problem.k1.matvec(&v)?;
    let mut k0v = problem.k0.matvec(&v)?;
    for i in 0..n {
        k1v[i] += eps * v[i];
        k0v[i] += eps * v[i];
    }

    let mut p = DenseMatrix::zeros(n, n);
    problem.fill_w_block(&mut p);
    let q = (0..n)
        .map(|i| match problem.arm(i) {
            Some(1) => -2.0 * k1v[i],
            Some(_) => -2.0 * k0v[i],
            None => 0.0,
        })
        .collect();
    let (a, b) = problem.arm_rows(n);
    let lower = vec![0.0; n];
    let upper = (0..n)
        .map(|i| if problem.in_study[i] { f64::INFINITY } else { 0.0 })
        .collect();
    let qp = QuadraticProgram::unconstrained(p, q)
        .with_equalities(a, b)
        .with_bounds(lower, upper);
    let constant = dot(&v, &k1v) + dot(&v, &k0v);
    Ok(KomQp::finish(qp, KomMode::FixedV, n, problem.kernel_scale(), constant))
}

/// Joint program in `(W, V)`, with `V` on the unit-mean scale and supported
/// on the study sample.
pub fn build_variable_v_qp(problem: &KomProblem) -> Result<KomQp> {
    problem.validate()?;
    let n = problem.n();
    let study = problem.in_study.iter().filter(|&&s| s).count();
    let subset = match problem.mode {
        KomMode::FixedV => {
            return Err(Error::InvalidConfig("joint program requested for fixed mode".into()));
        }
        KomMode::Kowate => None,
        KomMode::Kosate => {
            let size = problem
                .subset_size
                .ok_or_else(|| Error::InvalidConfig("KOSATE needs a subset size".into()))?;
            if size == 0 || size > study {
                return Err(Error::InvalidSubsetSize { size, available: study });
            }
            Some(size)
        }
    };

    let mut p = DenseMatrix::zeros(2 * n, 2 * n);
    problem.fill_w_block(&mut p);
    for i in 0..n {
        if !problem.in_study[i] {
            continue;
        }
        let ti = problem.treated[i] as u8;
        let kt = problem.gram(ti);
        for j in 0..n {
            if !problem.in_study[j] {
                continue;
            }
            let cross = -2.0 * kt[(i, j)];
            p[(i, n + j)] = cross;
            p[(n + j, i)] = cross;
            p[(n + i, n + j)] = 2.0 * (problem.k1[(i, j)] + problem.k0[(i, j)]);
        }
        p[(i, n + i)] -= 2.0 * problem.gram_jitter;
        p[(n + i, i)] -= 2.0 * problem.gram_jitter;
        p[(n + i, n + i)] += 2.0 * (2.0 * problem.gram_jitter + problem.v_penalty);
    }
    let (arm_a, mut b) = problem.arm_rows(2 * n);
    let mut a = DenseMatrix::zeros(3, 2 * n);
    for r in 0..2 {
        a.row_mut(r).copy_from_slice(arm_a.row(r));
    }
    for i in 0..n {
        if problem.in_study[i] {
            a[(2, n + i)] = 1.0;
        }
    }
    b.push(n as f64);

    let v_cap = subset.map_or(f64::INFINITY, |s| n as f64 / s as f64);
    let lower = vec![0.0; 2 * n];
    let mut upper = vec![0.0; 2 * n];
    for i in 0..n {
        if problem.in_study[i] {
            upper[i] = f64::INFINITY;
            upper[n + i] = v_cap;
        }
    }
    let mut qp = QuadraticProgram::unconstrained(p, vec![0.0; 2 * n])
        .with_equalities(a, b)
        .with_bounds(lower, upper);
    if let Some(size) = subset {
        let mut mask = vec![false; 2 * n];
        for i in 0..n {
            mask[n + i] = problem.in_study[i];
        }
        qp.binary = Some(BinaryBlock {
            mask,
            level: v_cap,
            cardinality: size,
        });
    }
    Ok(KomQp::finish(qp, problem.mode, n, problem.kernel_scale(), 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
    pub rho_updates: usize,
    /// Worst-case CMSE of the continuous relaxation (KOSATE only).
    pub relaxation_cmse: Option<f64>,
}

/// Solution of one KOM program.
#[derive(Debug, Clone, PartialEq)]
pub struct KomSolution {
    pub w: Vec<f64>,
    /// Target weights on the unit-mean scale (given or optimized).
    pub v: Vec<f64>,
    pub cmse: CmseBreakdown,
    /// Worst-case CMSE implied by the QP objective.
    pub qp_cmse: f64,
    pub diagnostics: SolverDiagnostics,
}

/// Builds and solves the program for `problem`. Solver failures are
/// reported through the diagnostics status, not as errors. The program
/// carries its own Gram jitter, so the solver adds none.
pub fn solve_problem(problem: &KomProblem, settings: &SolverSettings) -> Result<(KomSolution, QpSolution)> {
    let settings = &SolverSettings {
        psd_jitter: 0.0,
        ..*settings
    };
    let n = problem.n();
    let kqp = match problem.mode {
        KomMode::FixedV => build_fixed_v_qp(problem)?,
        _ => build_variable_v_qp(problem)?,
    };
    let sol = if kqp.qp.binary.is_some() {
        solve_relax_and_round(&kqp.qp, settings)?
    } else {
        solve(&kqp.qp, settings)?
    };
    let (w, v) = match problem.mode {
        KomMode::FixedV => (
            sol.x.clone(),
            problem.target.as_ref().expect("validated").unit_mean(),
        ),
        _ => (sol.x[..n].to_vec(), sol.x[n..].to_vec()),
    };
    let cmse = if sol.status == QpStatus::Infeasible {
        CmseBreakdown {
            total: f64::NAN,
            delta1_sq: f64::NAN,
            delta0_sq: f64::NAN,
            penalty: f64::NAN,
        }
    } else {
        let mut c = worst_case_cmse(&w, &v, &problem.k1, &problem.k0, &problem.penalty, &problem.in_study, &problem.treated)?;
        c.delta1_sq = c.delta1_sq.max(0.0);
        c.delta0_sq = c.delta0_sq.max(0.0);
        c
    };
    let diagnostics = SolverDiagnostics {
        status: sol.status,
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        dual_residual: sol.dual_residual,
        polished: sol.polished,
        rho_updates: sol.rho_updates,
        relaxation_cmse: sol.relaxation_objective.map(|o| kqp.cmse_from_objective(o)),
    };
    let solution = KomSolution {
        w,
        v,
        cmse,
        qp_cmse: kqp.cmse_from_objective(sol.objective),
        diagnostics,
    };
    Ok((solution, sol))
}

/// One rung of the fallback ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderStep {
    pub family: KernelFamily,
    pub degree: u32,
}

impl LadderStep {
    pub fn new(family: KernelFamily, degree: u32) -> Self {
        Self { family, degree }
    }

    /// Product kernel of degree 2, then Mahalanobis polynomials of degree
    /// 3, 2 and 1.
    pub fn default_ladder() -> Vec<Self> {
        vec![
            Self::new(KernelFamily::ProductPoly, 2),
            Self::new(KernelFamily::PolyMahalanobis, 3),
            Self::new(KernelFamily::PolyMahalanobis, 2),
            Self::new(KernelFamily::PolyMahalanobis, 1),
        ]
    }
}

impl fmt::Display for LadderStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} degree {}", self.family, self.degree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttemptOutcome {
    Solved,
    IndefiniteGram { arm: u8, jitter: f64 },
    SolverStatus(QpStatus),
    Failed(String),
}

impl fmt::Display for AttemptOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Solved => f.write_str("solved"),
            Self::IndefiniteGram { arm, jitter } => {
                write!(f, "gram of arm {arm} indefinite (jitter {jitter:e})")
            }
            Self::SolverStatus(s) => write!(f, "solver stopped with status {s:?}"),
            Self::Failed(msg) => f.write_str(msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderAttempt {
    pub kernel: LadderStep,
    pub outcome: AttemptOutcome,
}

/// Source of the per-arm variance penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaPolicy {
    GpTuned(LambdaConvention),
    Zero,
    Fixed(f64),
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        Self::GpTuned(LambdaConvention::default())
    }
}

/// Hyperparameters for both arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmHyperparams {
    pub treated: GpHyperparams,
    pub control: GpHyperparams,
}

impl ArmHyperparams {
    /// Unit scale and shape with zero noise, for runs without tuning.
    pub fn untuned(family: KernelFamily, degree: u32) -> Self {
        let h = |arm| GpHyperparams {
            arm,
            family,
            degree,
            gamma: 1.0,
            theta: 1.0,
            sigma2: 0.0,
            lml: f64::NAN,
            outcome_mean: 0.0,
            evaluations: 0,
            fitted_units: 0,
        };
        Self {
            treated: h(1),
            control: h(0),
        }
    }

    pub fn lambdas(&self, policy: LambdaPolicy) -> (f64, f64) {
        match policy {
            LambdaPolicy::GpTuned(conv) => (lambda_from(&self.treated, conv), lambda_from(&self.control, conv)),
            LambdaPolicy::Zero => (0.0, 0.0),
            LambdaPolicy::Fixed(l) => (l, l),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KomOptions {
    pub ladder: Vec<LadderStep>,
    pub lambda: LambdaPolicy,
    pub settings: SolverSettings,
    pub v_penalty: f64,
    pub gram_jitter: f64,
    /// Per-unit penalty replacing the per-arm scalars.
    pub unit_penalty: Option<Vec<f64>>,
}

impl Default for KomOptions {
    fn default() -> Self {
        Self {
            ladder: LadderStep::default_ladder(),
            lambda: LambdaPolicy::default(),
            settings: SolverSettings::default(),
            v_penalty: 0.0,
            gram_jitter: GRAM_JITTER,
            unit_penalty: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KomWeights {
    pub estimand: EstimandKind,
    /// Zero outside the study sample; each arm sums to `n`.
    pub w: Vec<f64>,
    /// Target weights on the unit-mean scale.
    pub target: Vec<f64>,
    /// Optimized target weights on the simplex scale (joint modes only).
    pub v_star: Option<Vec<f64>>,
    /// Worst-case CMSE at the solution.
    pub objective: f64,
    pub delta1_sq: f64,
    pub delta0_sq: f64,
    pub variance_penalty: f64,
    pub lambda1: f64,
    pub lambda0: f64,
    pub kernel: LadderStep,
    pub degree_used: u32,
    pub solver: SolverDiagnostics,
    pub attempts: Vec<LadderAttempt>,
}

/// Computes KOM weights for `spec`, walking the kernel ladder until a
/// program solves. Hyperparameters are reused at every rung.
pub fn solve_kom(
    d: &Dataset,
    spec: &EstimandSpec,
    phi: Option<&[f64]>,
    hyper: &ArmHyperparams,
    opts: &KomOptions,
) -> Result<KomWeights> {
    spec.validate()?;
    if opts.ladder.is_empty() {
        return Err(Error::InvalidConfig("empty kernel ladder".into()));
    }
    let n = d.n();
    let (mode, target, subset) = match spec.kind {
        EstimandKind::Kowate => (KomMode::Kowate, None, None),
        EstimandKind::Kosate => {
            let size = spec
                .subset_size
                .ok_or_else(|| Error::InvalidConfig("KOSATE needs a subset size".into()))?;
            (KomMode::Kosate, None, Some(size))
        }
        _ => (KomMode::FixedV, Some(fixed_target_weights(spec, d, phi)?), None),
    };
    let (lambda1, lambda0) = hyper.lambdas(opts.lambda);
    let penalty = match &opts.unit_penalty {
        Some(v) => Penalty::PerUnit(v.clone()),
        None => Penalty::per_arm(lambda1, lambda0),
    };
    let whitening = Whitening::fit(d.x())?;
    let mut attempts = Vec::new();
    for &step in &opts.ladder {
        let gram = |h: &GpHyperparams| {
            whitening.gram(&KernelConfig::new(step.family, step.degree, h.gamma, h.theta))
        };
        let (g1, g0) = match (gram(&hyper.treated), gram(&hyper.control)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                attempts.push(LadderAttempt {
                    kernel: step,
                    outcome: AttemptOutcome::Failed(e.to_string()),
                });
                continue;
            }
        };
        let indefinite = [(1u8, &g1), (0u8, &g0)]
            .into_iter()
            .map(|(arm, g)| (arm, psd_check(g)))
            .find(|(_, diag)| diag.indefinite);
        if let Some((arm, diag)) = indefinite {
            attempts.push(LadderAttempt {
                kernel: step,
                outcome: AttemptOutcome::IndefiniteGram {
                    arm,
                    jitter: diag.jitter_used,
                },
            });
            continue;
        }
        let problem = KomProblem {
            k1: g1.k,
            k0: g0.k,
            treated: d.treated().to_vec(),
            in_study: d.in_study().to_vec(),
            penalty: penalty.clone(),
            mode,
            target: target.clone(),
            subset_size: subset,
            v_penalty: opts.v_penalty,
            gram_jitter: opts.gram_jitter,
        };
        let solution = match solve_problem(&problem, &opts.settings) {
            Ok((s, _)) => s,
            Err(e) => {
                attempts.push(LadderAttempt {
                    kernel: step,
                    outcome: AttemptOutcome::Failed(e.to_string()),
                });
                continue;
            }
        };
        if solution.diagnostics.status != QpStatus::Solved {
            attempts.push(LadderAttempt {
                kernel: step,
                outcome: AttemptOutcome::SolverStatus(solution.diagnostics.status),
            });
            continue;
        }
        attempts.push(LadderAttempt {
            kernel: step,
            outcome: AttemptOutcome::Solved,
        });
        let v_star = (mode != KomMode::FixedV).then(|| {
            TargetWeights {
                v: solution.v.clone(),
                normalization: Normalization::UnitMean,
            }
            .simplex()
        });
        let mut w = solution.w;
        for (wi, &s) in w.iter_mut().zip(d.in_study()) {
            if !s {
                *wi = 0.0;
            }
        }
        debug_assert_eq!(w.len(), n);
        return Ok(KomWeights {
            estimand: spec.kind,
            w,
            target: solution.v,
            v_star,
            objective: solution.cmse.total,
            delta1_sq: solution.cmse.delta1_sq,
            delta0_sq: solution.cmse.delta0_sq,
            variance_penalty: solution.cmse.penalty,
            lambda1,
            lambda0,
            kernel: step,
            degree_used: step.degree,
            solver: solution.diagnostics,
            attempts,
        });
    }
    Err(Error::AllDegreesFailed(attempts))
}
