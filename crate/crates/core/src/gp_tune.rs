//! Per-arm kernel hyperparameters from the Gaussian-process log marginal
//! likelihood, and the variance penalty derived from them.

use std::cell::Cell;
use std::f64::consts::{LN_10, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, KernelFamily, Whitening};
use crate::linalg::{cholesky, dot, DenseMatrix};

pub const MIN_ARM_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub arm: u8,
    pub family: KernelFamily,
    pub degree: u32,
    pub gamma: f64,
    pub theta: f64,
    pub sigma2: f64,
    /// Log marginal likelihood at the returned point.
    pub lml: f64,
    /// Arm outcome mean removed before fitting.
    pub outcome_mean: f64,
    pub evaluations: usize,
    /// Units used after subsampling.
    pub fitted_units: usize,
}

impl GpHyperparams {
    pub fn kernel(&self) -> KernelConfig {
        KernelConfig::new(self.family, self.degree, self.gamma, self.theta)
    }
}

/// How the kernel scale enters the variance penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaConvention {
    /// `λ = σ²/γ²`.
    #[default]
    Printed,
    /// `λ = σ²/γ`, which matches the linear scale of the Gram.
    LinearScale,
}

impl FromStr for LambdaConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(Self::Printed),
            "linear-scale" | "linear" => Ok(Self::LinearScale),
            other => Err(Error::InvalidConfig(format!("unknown lambda convention `{other}`"))),
        }
    }
}

impl fmt::Display for LambdaConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Printed => "printed",
            Self::LinearScale => "linear-scale",
        })
    }
}

pub fn lambda_from(h: &GpHyperparams, convention: LambdaConvention) -> f64 {
    match convention {
        LambdaConvention::Printed => h.sigma2 / (h.gamma * h.gamma),
        LambdaConvention::LinearScale => h.sigma2 / h.gamma,
    }
}

/// `−½ yᵀ(K+σ²I)⁻¹y − ½ log det(K+σ²I) − (m/2) log 2π`.
pub fn log_marginal_likelihood(k: &DenseMatrix, y: &[f64], sigma2: f64) -> Result<f64> {
    let m = y.len();
    if !k.is_square() || k.rows() != m {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} Gram with {m} outcomes",
            k.rows(),
            k.cols()
        )));
    }
    let mut a = k.clone();
    a.add_diagonal(sigma2);
    lml_of_covariance(&a, y)
}

fn lml_of_covariance(a: &DenseMatrix, y: &[f64]) -> Result<f64> {
    let m = y.len();
    let mean_diag = a.trace() / m.max(1) as f64;
    let f = cholesky(a, 1e-6 * mean_diag.max(f64::MIN_POSITIVE))?;
    let mut alpha = y.to_vec();
    f.solve_lower_in_place(&mut alpha);
    let fit = dot(&alpha, &alpha);
    Ok(-0.5 * fit - 0.5 * f.log_det() - 0.5 * m as f64 * (2.0 * PI).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub family: KernelFamily,
    pub degree: u32,
    pub subsample_cap: usize,
    /// Nelder–Mead evaluations after the grid.
    pub max_evaluations: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            family: KernelFamily::ProductPoly,
            degree: 2,
            subsample_cap: 500,
            max_evaluations: 500,
        }
    }
}

/// Every `⌈m/cap⌉`-th index.
pub fn stride_subsample(rows: &[usize], cap: usize) -> Vec<usize> {
    let cap = cap.max(1);
    let stride = rows.len().div_ceil(cap).max(1);
    rows.iter().step_by(stride).copied().collect()
}

pub fn tune(d: &Dataset, arm: u8, opts: &TuneOptions) -> Result<GpHyperparams> {
    let whitening = Whitening::fit(d.x())?;
    tune_arm(d, &whitening, arm, opts)
}

/// Like [`tune`] with precomputed whitening statistics.
pub fn tune_arm(d: &Dataset, whitening: &Whitening, arm: u8, opts: &TuneOptions) -> Result<GpHyperparams> {
    let rows = d.arm_indices(arm);
    if rows.len() < MIN_ARM_SIZE {
        return Err(Error::ArmTooSmall {
            arm,
            size: rows.len(),
            required: MIN_ARM_SIZE,
        });
    }
    let rows = stride_subsample(&rows, opts.subsample_cap);
    let y: Vec<f64> = rows.iter().map(|&i| d.y(i)).collect();
    fit_hyperparams(whitening, &rows, &y, arm, opts)
}

/// Maximizes the LML over `(log γ, log θ, log σ²)` on a box: a 7×7×7 grid
/// spanning 10⁻³..10³ around the anchors, then Nelder–Mead from the best
/// grid point.
pub fn fit_hyperparams(
    whitening: &Whitening,
    rows: &[usize],
    y_raw: &[f64],
    arm: u8,
    opts: &TuneOptions,
) -> Result<GpHyperparams> {
    let m = rows.len();
    let outcome_mean = y_raw.iter().sum::<f64>() / m as f64;
    let y: Vec<f64> = y_raw.iter().map(|v| v - outcome_mean).collect();
    let var = dot(&y, &y) / m as f64;
    let anchor = if var > 1e-12 * (1.0 + outcome_mean * outcome_mean) {
        var
    } else {
        1.0
    };
    // log-space box shared by the grid and the simplex search
    let centers = [anchor.ln(), 0.0, anchor.ln()];
    let lo: Vec<f64> = centers.iter().map(|c| c - 3.0 * LN_10).collect();
    let hi: Vec<f64> = centers.iter().map(|c| c + 3.0 * LN_10).collect();

    let unit_gram = |theta: f64| -> Result<UnitGram> {
        let cfg = KernelConfig::new(opts.family, opts.degree, 1.0, theta);
        UnitGram::build(whitening, rows, &cfg, &y)
    };
    let yy = dot(&y, &y);
    let evaluations = Cell::new(0usize);
    let neg_lml_with = |base: &UnitGram, log_gamma: f64, log_sigma2: f64| -> f64 {
        evaluations.set(evaluations.get() + 1);
        match base.lml(&y, yy, log_gamma.exp(), log_sigma2.exp()) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    };

    let steps: Vec<f64> = (-3..=3).map(|k| k as f64 * LN_10).collect();
    let mut best = ([centers[0], centers[1], centers[2]], f64::INFINITY);
    for &dt in &steps {
        let log_theta = centers[1] + dt;
        let base = unit_gram(log_theta.exp())?;
        for &dg in &steps {
            for &ds in &steps {
                let p = [centers[0] + dg, log_theta, centers[2] + ds];
                let f = neg_lml_with(&base, p[0], p[2]);
                if f < best.1 {
                    best = (p, f);
                }
            }
        }
    }
    if !best.1.is_finite() {
        return Err(Error::NotPositiveDefinite { max_jitter: 0.0 });
    }

    let mut cached: Option<(f64, UnitGram)> = None;
    let mut objective = |p: &[f64; 3]| -> f64 {
        let theta = p[1].exp();
        let stale = cached.as_ref().map_or(true, |(t, _)| *t != theta);
        if stale {
            match unit_gram(theta) {
                Ok(g) => cached = Some((theta, g)),
                Err(_) => return f64::INFINITY,
            }
        }
        let base = &cached.as_ref().expect("cached gram").1;
        neg_lml_with(base, p[0], p[2])
    };
    let (x, f) = nelder_mead(
        &mut objective,
        best.0,
        best.1,
        LN_10 / 2.0,
        [&lo[..], &hi[..]],
        opts.max_evaluations,
    );

    Ok(GpHyperparams {
        arm,
        family: opts.family,
        degree: opts.degree,
        gamma: x[0].exp(),
        theta: x[1].exp(),
        sigma2: x[2].exp(),
        lml: -f,
        outcome_mean,
        evaluations: evaluations.get(),
        fitted_units: m,
    })
}

/// Gram at `γ = 1` for one θ. Polynomial kernels of low rank are held as
/// `ΦᵀΦ` and `Φᵀy`, so each likelihood costs `O(r³)` instead of `O(m³)`.
enum UnitGram {
    Dense(DenseMatrix),
    Features { g: DenseMatrix, b: Vec<f64> },
}

impl UnitGram {
    fn build(whitening: &Whitening, rows: &[usize], cfg: &KernelConfig, y: &[f64]) -> Result<Self> {
        match whitening.feature_map(rows, cfg, rows.len() / 2)? {
            Some(phi) => Ok(Self::Features {
                g: phi.transpose().matmul(&phi)?,
                b: phi.matvec_t(y)?,
            }),
            None => Ok(Self::Dense(whitening.gram_rows(rows, cfg)?.k)),
        }
    }

    /// LML at `K = γ·unit`, through the matrix determinant lemma and the
    /// Woodbury identity in the feature case.
    fn lml(&self, y: &[f64], yy: f64, gamma: f64, sigma2: f64) -> Result<f64> {
        match self {
            Self::Dense(k) => {
                let mut a = k.scaled(gamma);
                a.add_diagonal(sigma2);
                lml_of_covariance(&a, y)
            }
            Self::Features { g, b } => {
                let (m, r) = (y.len(), g.rows());
                let mut a = g.scaled(gamma);
                a.add_diagonal(sigma2);
                let f = cholesky(&a, 0.0)?;
                let mut c = b.clone();
                f.solve_lower_in_place(&mut c);
                let fit = (yy - gamma * dot(&c, &c)).max(0.0) / sigma2;
                let log_det = (m - r) as f64 * sigma2.ln() + f.log_det();
                Ok(-0.5 * fit - 0.5 * log_det - 0.5 * m as f64 * (2.0 * PI).ln())
            }
        }
    }
}

/// Box-constrained Nelder–Mead minimization (points are clamped into the box).
fn nelder_mead<F: FnMut(&[f64; 3]) -> f64>(
    f: &mut F,
    start: [f64; 3],
    f_start: f64,
    step: f64,
    bounds: [&[f64]; 2],
    budget: usize,
) -> ([f64; 3], f64) {
    let clamp = |p: [f64; 3]| -> [f64; 3] {
        let mut q = p;
        for k in 0..3 {
            q[k] = q[k].clamp(bounds[0][k], bounds[1][k]);
        }
        q
    };
    let mut simplex: Vec<([f64; 3], f64)> = vec![(start, f_start)];
    let mut used = 0usize;
    for k in 0..3 {
        let mut p = start;
        // step inward when the start sits on the upper face
        p[k] += if p[k] + step > bounds[1][k] { -step } else { step };
        let p = clamp(p);
        used += 1;
        simplex.push((p, f(&p)));
    }
    let centroid = |s: &[([f64; 3], f64)]| -> [f64; 3] {
        let mut c = [0.0; 3];
        for (p, _) in &s[..3] {
            for k in 0..3 {
                c[k] += p[k] / 3.0;
            }
        }
        c
    };
    let along = |c: &[f64; 3], p: &[f64; 3], t: f64| -> [f64; 3] {
        let mut q = [0.0; 3];
        for k in 0..3 {
            q[k] = c[k] + t * (p[k] - c[k]);
        }
        q
    };

    while used < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[3].1);
        let anchor = simplex[0].0;
        let spread = simplex[1..]
            .iter()
            .flat_map(|(p, _)| (0..3).map(move |k| (p[k] - anchor[k]).abs()))
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-10 * (1.0 + best.abs()) && spread < 1e-6 {
            break;
        }
        let c = centroid(&simplex);
        let w = simplex[3].0;
        let xr = clamp(along(&c, &w, -1.0));
        let fr = f(&xr);
        used += 1;
        if fr < simplex[0].1 {
            let xe = clamp(along(&c, &w, -2.0));
            let fe = f(&xe);
            used += 1;
            simplex[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[3].1 {
                let xc = clamp(along(&c, &w, -0.5));
                (xc, f(&xc))
            } else {
                let xc = clamp(along(&c, &w, 0.5));
                (xc, f(&xc))
            };
            used += 1;
            if fc < simplex[3].1.min(fr) {
                simplex[3] = (xc, fc);
            } else {
                let b = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    s.0 = clamp(along(&b, &s.0, 0.5));
                    s.1 = f(&s.0);
                    used += 1;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}
