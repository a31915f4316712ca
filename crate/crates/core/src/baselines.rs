//! Reference estimators: polynomial logistic propensity models, inverse
//! probability weights, overlap and truncation targets, and polynomial
//! outcome regression.

use serde::{Deserialize, Serialize};

use crate::data::{within_truncation, Dataset, EstimandKind, EstimandSpec, Normalization, TargetWeights};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, norm_inf, DenseMatrix};

const PROB_CLIP: f64 = 1e-6;
const SEPARATION_ETA: f64 = 30.0;

/// Exponent vectors of all monomials of total degree ≤ `degree` in `p`
/// variables, in graded lexicographic order.
pub fn monomials(p: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut current = vec![0u32; p];
        push_graded(&mut out, &mut current, 0, total);
    }
    out
}

fn push_graded(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    if current.is_empty() {
        if remaining == 0 {
            out.push(vec![]);
        }
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_graded(out, current, pos + 1, remaining - e);
    }
    current[pos] = 0;
}

/// `C(p + d, d)`.
pub fn n_poly_features(p: usize, degree: u32) -> usize {
    let d = degree as usize;
    (1..=d).fold(1usize, |acc, k| acc * (p + k) / k)
}

/// Polynomial design matrix with a leading constant column.
pub fn poly_features(x: &DenseMatrix, degree: u32) -> DenseMatrix {
    let terms = monomials(x.cols(), degree);
    let mut f = DenseMatrix::zeros(x.rows(), terms.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        for (c, exps) in terms.iter().enumerate() {
            f[(i, c)] = exps
                .iter()
                .zip(row)
                .map(|(&e, &v)| v.powi(e as i32))
                .product();
        }
    }
    f
}

/// Column standardization fitted on one sample and reused for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &DenseMatrix, rows: &[usize]) -> Self {
        let p = x.cols();
        let m = rows.len().max(1) as f64;
        let mut mean = vec![0.0; p];
        for &i in rows {
            for (mu, v) in mean.iter_mut().zip(x.row(i)) {
                *mu += v / m;
            }
        }
        let mut scale = vec![0.0; p];
        for &i in rows {
            for k in 0..p {
                scale[k] += (x[(i, k)] - mean[k]).powi(2) / m;
            }
        }
        let scale = scale
            .into_iter()
            .zip(&mean)
            .map(|(v, mu)| v.sqrt().max(1e-8 * mu.abs().max(1.0)))
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
        let p = x.cols();
        let mut z = DenseMatrix::zeros(rows.len(), p);
        for (r, &i) in rows.iter().enumerate() {
            for k in 0..p {
                z[(r, k)] = (x[(i, k)] - self.mean[k]) / self.scale[k];
            }
        }
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTarget {
    Treatment,
    Sampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub degree: u32,
    /// Coefficients over the features of standardized covariates.
    pub coefficients: Vec<f64>,
    pub target: ModelTarget,
    pub converged: bool,
    /// Linear predictor exceeded the separation threshold.
    pub separated: bool,
    pub iterations: usize,
    standardizer: Standardizer,
}

impl PropensityModel {
    /// Predicted probabilities, clipped to `[1e-6, 1 − 1e-6]`.
    pub fn predict(&self, x: &DenseMatrix) -> Vec<f64> {
        let rows: Vec<usize> = (0..x.rows()).collect();
        let f = poly_features(&self.standardizer.apply(x, &rows), self.degree);
        f.matvec(&self.coefficients)
            .expect("feature count matches")
            .into_iter()
            .map(|eta| logistic(eta).clamp(PROB_CLIP, 1.0 - PROB_CLIP))
            .collect()
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn penalized_loglik(f: &DenseMatrix, y: &[f64], beta: &[f64], ridge: f64) -> f64 {
    let eta = f.matvec(beta).expect("shapes");
    let ll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| {
            // log(1 + exp(e)) without overflow
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            yi * e - softplus
        })
        .sum();
    ll - 0.5 * ridge * dot(beta, beta)
}

/// Ridge-penalized logistic regression on polynomial features by Newton
/// iterations with step halving.
pub fn fit_logistic_poly(
    x: &DenseMatrix,
    labels: &[bool],
    degree: u32,
    ridge: f64,
    target: ModelTarget,
) -> Result<PropensityModel> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::SingleClass);
    }
    let rows: Vec<usize> = (0..n).collect();
    let standardizer = Standardizer::fit(x, &rows);
    let f = poly_features(&standardizer.apply(x, &rows), degree);
    let k = f.cols();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();

    let mut beta = vec![0.0; k];
    let mut ll = penalized_loglik(&f, &y, &beta, ridge);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let eta = f.matvec(&beta)?;
        let mu: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        let mut h = DenseMatrix::zeros(k, k);
        let mut g: Vec<f64> = beta.iter().map(|b| -ridge * b).collect();
        for i in 0..n {
            let row = f.row(i);
            let wi = mu[i] * (1.0 - mu[i]);
            let ri = y[i] - mu[i];
            for a in 0..k {
                g[a] += row[a] * ri;
                let wa = wi * row[a];
                if wa == 0.0 {
                    continue;
                }
                for b in 0..=a {
                    h[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..k {
            h[(a, a)] += ridge;
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        let scale = (h.trace() / k as f64).max(1e-300);
        let Ok(factor) = cholesky(&h, 1e-4 * scale) else {
            break;
        };
        let step = factor.solve(&g)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let cand_ll = penalized_loglik(&f, &y, &cand, ridge);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                accepted = Some((cand, cand_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_ll)) = accepted else {
            break;
        };
        let change = norm_inf(&step) * t;
        beta = cand;
        ll = cand_ll;
        if norm_inf(&f.matvec(&beta)?) > SEPARATION_ETA {
            separated = true;
            break;
        }
        if change < 1e-8 {
            converged = true;
            break;
        }
    }
    Ok(PropensityModel {
        degree,
        coefficients: beta,
        target,
        converged: converged && !separated,
        separated,
        iterations,
        standardizer,
    })
}

/// Propensity model for treatment, fitted on the study sample and predicted
/// for every unit.
pub fn fit_treatment_propensity(d: &Dataset, degree: u32) -> Result<(PropensityModel, Vec<f64>)> {
    let study = d.study_indices();
    let x = d.x().select_rows(&study);
    let labels: Vec<bool> = study.iter().map(|&i| d.treated()[i]).collect();
    let model = fit_logistic_poly(&x, &labels, degree, 1e-8, ModelTarget::Treatment)?;
    let phi = model.predict(d.x());
    Ok((model, phi))
}

/// Model for membership in the study sample, fitted on all units.
pub fn fit_sampling_model(d: &Dataset, degree: u32) -> Result<(PropensityModel, Vec<f64>)> {
    let model = fit_logistic_poly(d.x(), d.in_study(), degree, 1e-8, ModelTarget::Sampling)?;
    let psi = model.predict(d.x());
    Ok((model, psi))
}

/// IPW weights with each arm rescaled to sum to `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwWeights {
    pub estimand: EstimandKind,
    /// Normalized weights, zero outside the study sample.
    pub w: Vec<f64>,
    /// Weights before per-arm rescaling.
    pub raw: Vec<f64>,
    /// Alternative raw weights kept for comparison: for SATT the untilted
    /// control form `1/(1−φ)`, for TATE the inverse-probability form `1/ψ`.
    pub alternative_raw: Option<Vec<f64>>,
}

fn check_probabilities(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch(format!("{what} has length {}, expected {n}", v.len())));
    }
    if v.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidData(format!("{what} must lie strictly inside (0, 1)")));
    }
    Ok(())
}

fn inverse_propensity(t: bool, phi: f64) -> f64 {
    if t {
        1.0 / phi
    } else {
        1.0 / (1.0 - phi)
    }
}

/// Inverse probability weights for a fixed-formula estimand.
pub fn ipw_weights(spec: &EstimandSpec, phi: &[f64], psi: Option<&[f64]>, d: &Dataset) -> Result<IpwWeights> {
    let n = d.n();
    check_probabilities(phi, n, "propensity")?;
    let s = d.in_study();
    let t = d.treated();
    let study = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..n).map(|i| if s[i] { f(i) } else { 0.0 }).collect() };
    let mut alternative = None;
    let raw = match spec.kind {
        EstimandKind::Sate => study(&|i| inverse_propensity(t[i], phi[i])),
        EstimandKind::Satt => {
            let n_t = d.counts().treated as f64;
            alternative = Some(study(&|i| if t[i] { 1.0 / n_t } else { 1.0 / (1.0 - phi[i]) }));
            study(&|i| if t[i] { 1.0 } else { phi[i] / (1.0 - phi[i]) })
        }
        EstimandKind::Tate => {
            let psi = psi.ok_or(Error::MissingSamplingModel(spec.kind.label()))?;
            check_probabilities(psi, n, "sampling probability")?;
            let outside = d.counts().outside as f64;
            if outside == 0.0 {
                return Err(Error::EmptyTarget("TATE needs units outside the study sample".into()));
            }
            alternative = Some(study(&|i| inverse_propensity(t[i], phi[i]) / (outside * psi[i])));
            study(&|i| (1.0 - psi[i]) / psi[i] * inverse_propensity(t[i], phi[i]))
        }
        EstimandKind::Owate => study(&|i| if t[i] { 1.0 - phi[i] } else { phi[i] }),
        EstimandKind::Osate => {
            spec.validate()?;
            study(&|i| {
                if within_truncation(phi[i], spec.alpha) {
                    inverse_propensity(t[i], phi[i])
                } else {
                    0.0
                }
            })
        }
        EstimandKind::Kowate | EstimandKind::Kosate => {
            return Err(Error::InvalidConfig(format!("{} weights come from the joint program", spec.kind)));
        }
    };
    let w = normalize_arms(&raw, d)?;
    Ok(IpwWeights {
        estimand: spec.kind,
        w,
        raw,
        alternative_raw: alternative,
    })
}

/// Rescales each arm of `raw` to sum to `n`.
pub fn normalize_arms(raw: &[f64], d: &Dataset) -> Result<Vec<f64>> {
    let n = d.n() as f64;
    let mut sums = [0.0f64; 2];
    for i in d.study_indices() {
        sums[d.treated()[i] as usize] += raw[i];
    }
    for (arm, name) in [(1usize, "treated"), (0, "control")] {
        if !(sums[arm] > 0.0) {
            return Err(Error::EmptyTarget(format!("no {name} unit carries weight")));
        }
    }
    Ok((0..d.n())
        .map(|i| {
            if d.in_study()[i] {
                raw[i] * n / sums[d.treated()[i] as usize]
            } else {
                0.0
            }
        })
        .collect())
}

/// Weights whose signed weighted mean is unbiased for the target effect
/// given the true treatment and sampling probabilities, without arm
/// rescaling. Random normalizers (treated and outside counts) use
/// leave-one-out corrections.
pub fn unbiased_weights(spec: &EstimandSpec, phi: &[f64], psi: Option<&[f64]>, d: &Dataset) -> Result<Vec<f64>> {
    let n = d.n();
    check_probabilities(phi, n, "propensity")?;
    let nf = n as f64;
    let s = d.in_study();
    let t = d.treated();
    let w = match spec.kind {
        EstimandKind::Sate => (0..n)
            .map(|i| if s[i] { inverse_propensity(t[i], phi[i]) } else { 0.0 })
            .collect(),
        EstimandKind::Satt => {
            let n_t = d.counts().treated as f64;
            (0..n)
                .map(|i| match (s[i], t[i]) {
                    (false, _) => 0.0,
                    (true, true) => nf / n_t,
                    (true, false) => phi[i] / (1.0 - phi[i]) * nf / (n_t + 1.0),
                })
                .collect()
        }
        EstimandKind::Tate => {
            let psi = psi.ok_or(Error::MissingSamplingModel(spec.kind.label()))?;
            check_probabilities(psi, n, "sampling probability")?;
            let outside = d.counts().outside as f64;
            (0..n)
                .map(|i| {
                    if s[i] {
                        nf * (1.0 - psi[i]) / (psi[i] * (outside + 1.0)) * inverse_propensity(t[i], phi[i])
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        EstimandKind::Owate => {
            let n_o: f64 = (0..n).filter(|&i| s[i]).map(|i| phi[i] * (1.0 - phi[i])).sum();
            (0..n)
                .map(|i| {
                    if s[i] {
                        nf * if t[i] { 1.0 - phi[i] } else { phi[i] } / n_o
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        EstimandKind::Osate => {
            spec.validate()?;
            let n_trunc = (0..n).filter(|&i| s[i] && within_truncation(phi[i], spec.alpha)).count();
            if n_trunc == 0 {
                return Err(Error::EmptyTarget("no propensity inside the truncation band".into()));
            }
            (0..n)
                .map(|i| {
                    if s[i] && within_truncation(phi[i], spec.alpha) {
                        nf / n_trunc as f64 * inverse_propensity(t[i], phi[i])
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        EstimandKind::Kowate | EstimandKind::Kosate => {
            return Err(Error::InvalidConfig(format!("{} has no closed-form weights", spec.kind)));
        }
    };
    Ok(w)
}

/// Overlap (`∝ φ(1−φ)`) and truncated (`∝ 1{α < φ < 1−α}`) target weights
/// over all entries of `phi`.
pub fn overlap_and_truncated_v(phi: &[f64], alpha: f64) -> Result<(TargetWeights, TargetWeights)> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidConfig(format!("truncation level {alpha} outside (0, 0.5)")));
    }
    if phi.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidData("propensity must lie strictly inside (0, 1)".into()));
    }
    let n = phi.len() as f64;
    let to_unit_mean = |mass: Vec<f64>, what: &str| -> Result<TargetWeights> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptyTarget(what.to_string()));
        }
        TargetWeights::new(mass.into_iter().map(|m| n * m / total).collect(), Normalization::UnitMean)
    };
    let overlap = to_unit_mean(phi.iter().map(|p| p * (1.0 - p)).collect(), "overlap weights vanish")?;
    let truncated = to_unit_mean(
        phi.iter()
            .map(|&p| if within_truncation(p, alpha) { 1.0 } else { 0.0 })
            .collect(),
        &format!("no propensity inside ({alpha}, {})", 1.0 - alpha),
    )?;
    Ok((overlap, truncated))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRegression {
    pub tau_hat: f64,
    /// Predicted treated outcomes for every unit.
    pub g1: Vec<f64>,
    /// Predicted control outcomes for every unit.
    pub g0: Vec<f64>,
}

/// Per-arm ridge polynomial regression, averaged under `v`.
pub fn outcome_regression_estimate(d: &Dataset, degree: u32, v: &TargetWeights) -> Result<OutcomeRegression> {
    let n = d.n();
    if v.len() != n {
        return Err(Error::DimensionMismatch(format!("{} target weights for {n} units", v.len())));
    }
    let study = d.study_indices();
    let standardizer = Standardizer::fit(d.x(), &study);
    let all: Vec<usize> = (0..n).collect();
    let f_all = poly_features(&standardizer.apply(d.x(), &all), degree);
    let fit_arm = |arm: u8| -> Result<Vec<f64>> {
        let rows = d.arm_indices(arm);
        if rows.is_empty() {
            return Err(Error::EmptyArm {
                arm: if arm == 1 { "treated" } else { "control" },
            });
        }
        let f = f_all.select_rows(&rows);
        let y: Vec<f64> = rows.iter().map(|&i| d.y(i)).collect();
        let k = f.cols();
        let mut gram = f.transpose().matmul(&f)?;
        for a in 1..k {
            gram[(a, a)] += 1e-6;
        }
        gram.symmetrize();
        let rhs = f.matvec_t(&y)?;
        let scale = (gram.trace() / k as f64).max(1.0);
        let beta = cholesky(&gram, 1e-6 * scale)?.solve(&rhs)?;
        f_all.matvec(&beta)
    };
    let g1 = fit_arm(1)?;
    let g0 = fit_arm(0)?;
    let vw = v.unit_mean();
    let tau_hat = (0..n).map(|i| vw[i] * (g1[i] - g0[i])).sum::<f64>() / n as f64;
    Ok(OutcomeRegression { tau_hat, g1, g0 })
}
