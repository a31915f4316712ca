//! Weighted effect estimates with conditional, naive and sandwich standard
//! errors.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

/// Tolerance on the arm sums relative to `n`.
const ARM_SUM_TOL: f64 = 1e-4;

/// Checks the constraint set: nonnegative, zero outside the study sample,
/// each arm summing to `n`.
pub fn check_weights(w: &[f64], d: &Dataset) -> Result<()> {
    let n = d.n();
    if w.len() != n {
        return Err(Error::DimensionMismatch(format!("{} weights for {n} units", w.len())));
    }
    let mut sums = [0.0f64; 2];
    for i in 0..n {
        if !w[i].is_finite() || w[i] < -ARM_SUM_TOL {
            return Err(Error::WeightConstraintViolated(format!("weight {i} is {}", w[i])));
        }
        if d.in_study()[i] {
            sums[d.treated()[i] as usize] += w[i];
        } else if w[i].abs() > ARM_SUM_TOL {
            return Err(Error::WeightConstraintViolated(format!(
                "unit {i} is outside the study sample but has weight {}",
                w[i]
            )));
        }
    }
    let nf = n as f64;
    for (arm, name) in [(1usize, "treated"), (0, "control")] {
        if (sums[arm] - nf).abs() > ARM_SUM_TOL * nf {
            return Err(Error::WeightConstraintViolated(format!(
                "{name} weights sum to {}, expected {nf}",
                sums[arm]
            )));
        }
    }
    Ok(())
}

/// `(1/n) Σ_{i∈S} W_i (−1)^{T_i+1} Y_i` without constraint checks.
pub fn signed_weighted_mean(w: &[f64], d: &Dataset) -> f64 {
    let total: f64 = d
        .study_indices()
        .into_iter()
        .map(|i| {
            let y = d.y(i);
            if d.treated()[i] {
                w[i] * y
            } else {
                -w[i] * y
            }
        })
        .sum();
    total / d.n() as f64
}

/// Weighted estimate for weights in the constraint set.
pub fn weighted_estimate(w: &[f64], d: &Dataset) -> Result<f64> {
    check_weights(w, d)?;
    Ok(signed_weighted_mean(w, d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WlsFit {
    pub tau_hat: f64,
    pub intercept: f64,
    pub se_naive: f64,
    pub se_sandwich: f64,
}

/// Weighted least squares of `Y` on `(1, T)` over the study sample.
pub fn wls_sandwich(w: &[f64], d: &Dataset) -> Result<WlsFit> {
    check_weights(w, d)?;
    let study = d.study_indices();
    // arm totals of W and WY; XᵀΩX = [[s0 + s1, s1], [s1, s1]]
    let (mut s0, mut s1, mut s0y, mut s1y) = (0.0, 0.0, 0.0, 0.0);
    for &i in &study {
        let (wi, yi) = (w[i], d.y(i));
        if d.treated()[i] {
            s1 += wi;
            s1y += wi * yi;
        } else {
            s0 += wi;
            s0y += wi * yi;
        }
    }
    if !(s0 > 0.0 && s1 > 0.0) {
        return Err(Error::WeightConstraintViolated("weighted design is singular".into()));
    }
    let bread = [[1.0 / s0, -1.0 / s0], [-1.0 / s0, 1.0 / s0 + 1.0 / s1]];
    let intercept = s0y / s0;
    let tau_hat = s1y / s1 - intercept;

    let mut sse = 0.0;
    let mut used = 0usize;
    let mut meat = [[0.0f64; 2]; 2];
    for &i in &study {
        let t = if d.treated()[i] { 1.0 } else { 0.0 };
        let e = d.y(i) - intercept - tau_hat * t;
        let wi = w[i];
        if wi > 0.0 {
            used += 1;
        }
        sse += wi * e * e;
        let c = wi * wi * e * e;
        meat[0][0] += c;
        meat[0][1] += c * t;
        meat[1][1] += c * t;
    }
    meat[1][0] = meat[0][1];
    let dof = used.saturating_sub(2).max(1) as f64;
    let se_naive = (sse / dof * bread[1][1]).max(0.0).sqrt();
    // τ row of B M B
    let b1 = bread[1];
    let var_sandwich = (0..2)
        .map(|a| (0..2).map(|b| b1[a] * meat[a][b] * b1[b]).sum::<f64>())
        .sum::<f64>();
    // the two forms agree up to the arm-sum slack times the arm means
    let expected = signed_weighted_mean(w, d);
    let slack = ARM_SUM_TOL * (s1y.abs() / s1 + intercept.abs()) + 1e-9 * (1.0 + expected.abs());
    debug_assert!(
        (expected - tau_hat).abs() <= slack,
        "weighted mean {expected} against WLS {tau_hat}"
    );
    Ok(WlsFit {
        tau_hat,
        intercept,
        se_naive,
        se_sandwich: var_sandwich.max(0.0).sqrt(),
    })
}

/// `√((1/n²) Σ_{i∈S} W_i² σ²_{T_i})`.
pub fn conditional_se(w: &[f64], sigma2_treated: f64, sigma2_control: f64, in_study: &[bool], treated: &[bool]) -> f64 {
    let n = w.len() as f64;
    let total: f64 = (0..w.len())
        .filter(|&i| in_study[i])
        .map(|i| w[i] * w[i] * if treated[i] { sigma2_treated } else { sigma2_control })
        .sum();
    (total / (n * n)).max(0.0).sqrt()
}

/// Within-arm sample variance of the outcomes, a plug-in for the noise
/// level when no tuned value is available.
pub fn residual_variances(d: &Dataset) -> (f64, f64) {
    let var = |arm: u8| {
        let ys: Vec<f64> = d.arm_indices(arm).into_iter().map(|i| d.y(i)).collect();
        let m = ys.len() as f64;
        if ys.len() < 2 {
            return 0.0;
        }
        let mean = ys.iter().sum::<f64>() / m;
        ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (m - 1.0)
    };
    (var(1), var(0))
}

/// `(Σ W)² / Σ W²` over one arm.
pub fn effective_sample_size(w: &[f64], d: &Dataset, arm: u8) -> f64 {
    let (s, s2) = d
        .arm_indices(arm)
        .into_iter()
        .fold((0.0, 0.0), |(s, s2), i| (s + w[i], s2 + w[i] * w[i]));
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: String,
    pub method: String,
    pub tau_hat: f64,
    pub se_conditional: f64,
    pub se_naive: f64,
    pub se_sandwich: f64,
    /// Wald interval on the sandwich standard error.
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n_effective_treated: f64,
    pub n_effective_control: f64,
}

/// Full report for weights in the constraint set. `sigma2` gives the
/// per-arm noise variances `(treated, control)`; the residual plug-in is
/// used when absent.
pub fn estimate_report(
    estimand: &str,
    method: &str,
    w: &[f64],
    d: &Dataset,
    sigma2: Option<(f64, f64)>,
) -> Result<EstimateReport> {
    let fit = wls_sandwich(w, d)?;
    let (s1, s0) = sigma2.unwrap_or_else(|| residual_variances(d));
    let se_conditional = conditional_se(w, s1, s0, d.in_study(), d.treated());
    Ok(EstimateReport {
        estimand: estimand.to_string(),
        method: method.to_string(),
        tau_hat: fit.tau_hat,
        se_conditional,
        se_naive: fit.se_naive,
        se_sandwich: fit.se_sandwich,
        ci_lower: fit.tau_hat - Z_95 * fit.se_sandwich,
        ci_upper: fit.tau_hat + Z_95 * fit.se_sandwich,
        n_effective_treated: effective_sample_size(w, d, 1),
        n_effective_control: effective_sample_size(w, d, 0),
    })
}
