//! Gram matrices for the polynomial Mahalanobis kernel, the product of
//! univariate polynomial kernels, and a Gaussian kernel.
//!
//! Every kernel reads covariates through a [`Whitening`] fitted once on all
//! units, so a Gram built on a subset of rows is the principal submatrix of
//! the full Gram.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, sample_mean_cov, DenseMatrix, MeanCov};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    PolyMahalanobis,
    ProductPoly,
    Gaussian,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::PolyMahalanobis => "poly-mahalanobis",
            Self::ProductPoly => "product-poly",
            Self::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "poly-mahalanobis" | "poly" => Ok(Self::PolyMahalanobis),
            "product-poly" | "product" => Ok(Self::ProductPoly),
            "gaussian" | "rbf" => Ok(Self::Gaussian),
            other => Err(Error::InvalidConfig(format!("unknown kernel family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub degree: u32,
    /// Overall scale.
    pub gamma: f64,
    /// Weight of higher-order terms (inverse squared length-scale for the
    /// Gaussian family).
    pub theta: f64,
}

impl KernelConfig {
    pub fn new(family: KernelFamily, degree: u32, gamma: f64, theta: f64) -> Self {
        Self {
            family,
            degree,
            gamma,
            theta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::InvalidConfig("kernel degree must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) || !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kernel scale and shape must be positive, got gamma={} theta={}",
                self.gamma, self.theta
            )));
        }
        Ok(())
    }

    /// Kernel between two preprocessed coordinate rows.
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = self.degree as i32;
        match self.family {
            KernelFamily::PolyMahalanobis => self.gamma * (1.0 + self.theta * dot(a, b)).powi(d),
            KernelFamily::ProductPoly => {
                self.gamma
                    * a.iter()
                        .zip(b)
                        .map(|(u, v)| (1.0 + self.theta * u * v).powi(d))
                        .product::<f64>()
            }
            KernelFamily::Gaussian => {
                let sq: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                self.gamma * (-self.theta * sq).exp()
            }
        }
    }
}

impl fmt::Display for KernelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(d={})", self.family, self.degree)
    }
}

/// Sample moments of all units and the two coordinate systems derived from
/// them: Mahalanobis-whitened `z = L⁻¹(x − μ)` and per-coordinate
/// standardized `(x_k − μ_k)/σ_k`.
#[derive(Debug, Clone)]
pub struct Whitening {
    pub moments: MeanCov,
    pub scales: Vec<f64>,
    whitened: DenseMatrix,
    standardized: DenseMatrix,
}

impl Whitening {
    pub fn fit(x: &DenseMatrix) -> Result<Self> {
        let moments = sample_mean_cov(x)?;
        let scales = (0..x.cols())
            .map(|k| {
                let sd = (moments.cov[(k, k)] - moments.ridge).max(0.0).sqrt();
                sd.max(1e-8 * moments.mean[k].abs().max(1.0))
            })
            .collect();
        Self::from_parts(x, moments, scales)
    }

    fn from_parts(x: &DenseMatrix, moments: MeanCov, scales: Vec<f64>) -> Result<Self> {
        let (n, p) = (x.rows(), x.cols());
        if moments.mean.len() != p || scales.len() != p {
            return Err(Error::DimensionMismatch("whitening statistics".into()));
        }
        let mut whitened = DenseMatrix::zeros(n, p);
        let mut standardized = DenseMatrix::zeros(n, p);
        for i in 0..n {
            let centered: Vec<f64> = x.row(i).iter().zip(&moments.mean).map(|(v, m)| v - m).collect();
            let z = moments.factor.solve_lower(&centered)?;
            whitened.row_mut(i).copy_from_slice(&z);
            for k in 0..p {
                standardized[(i, k)] = centered[k] / scales[k];
            }
        }
        Ok(Self {
            moments,
            scales,
            whitened,
            standardized,
        })
    }

    pub fn n(&self) -> usize {
        self.whitened.rows()
    }

    pub fn whitened(&self) -> &DenseMatrix {
        &self.whitened
    }

    pub fn standardized(&self) -> &DenseMatrix {
        &self.standardized
    }

    fn coordinates(&self, family: KernelFamily) -> &DenseMatrix {
        match family {
            KernelFamily::ProductPoly => &self.standardized,
            KernelFamily::PolyMahalanobis | KernelFamily::Gaussian => &self.whitened,
        }
    }

    /// Gram over the given rows (in order).
    pub fn gram_rows(&self, rows: &[usize], cfg: &KernelConfig) -> Result<GramMatrix> {
        cfg.validate()?;
        let z = self.coordinates(cfg.family);
        let m = rows.len();
        let mut k = DenseMatrix::zeros(m, m);
        for a in 0..m {
            let za = z.row(rows[a]);
            for b in 0..=a {
                let v = cfg.eval(za, z.row(rows[b]));
                k[(a, b)] = v;
                k[(b, a)] = v;
            }
        }
        Ok(GramMatrix {
            k,
            config: *cfg,
            whitened: cfg.family != KernelFamily::ProductPoly,
        })
    }

    pub fn gram(&self, cfg: &KernelConfig) -> Result<GramMatrix> {
        let all: Vec<usize> = (0..self.n()).collect();
        self.gram_rows(&all, cfg)
    }

    /// Explicit features `Φ` over `rows` with `ΦΦᵀ` equal to the polynomial
    /// Gram. `None` for the Gaussian family or when more than `max_features`
    /// columns would be needed.
    pub fn feature_map(&self, rows: &[usize], cfg: &KernelConfig, max_features: usize) -> Result<Option<DenseMatrix>> {
        cfg.validate()?;
        let p = self.whitened.cols();
        let d = cfg.degree;
        let total_degree = match cfg.family {
            KernelFamily::Gaussian => return Ok(None),
            KernelFamily::ProductPoly => false,
            KernelFamily::PolyMahalanobis => true,
        };
        if feature_count(p, d, total_degree) > max_features {
            return Ok(None);
        }
        let terms = monomials(p, d, total_degree);
        let fact = |k: u32| (1..=k).map(f64::from).product::<f64>();
        let weights: Vec<f64> = terms
            .iter()
            .map(|a| {
                let order: u32 = a.iter().sum();
                let coef = if total_degree {
                    fact(d) / (fact(d - order) * a.iter().map(|&k| fact(k)).product::<f64>())
                } else {
                    a.iter().map(|&k| fact(d) / (fact(k) * fact(d - k))).product()
                };
                (cfg.gamma * coef * cfg.theta.powi(order as i32)).sqrt()
            })
            .collect();
        let z = self.coordinates(cfg.family);
        let mut phi = DenseMatrix::zeros(rows.len(), terms.len());
        for (i, &row) in rows.iter().enumerate() {
            let zi = z.row(row);
            for (j, a) in terms.iter().enumerate() {
                let mono: f64 = a.iter().zip(zi).map(|(&k, v)| v.powi(k as i32)).product();
                phi[(i, j)] = weights[j] * mono;
            }
        }
        Ok(Some(phi))
    }
}

/// Monomial count: `(d+1)^p` per-coordinate, `C(p+d, d)` by total degree.
fn feature_count(p: usize, d: u32, total_degree: bool) -> usize {
    let d = d as usize;
    if total_degree {
        (1..=d).fold(1usize, |acc, k| acc.saturating_mul(p + k) / k)
    } else {
        (0..p).fold(1usize, |acc, _| acc.saturating_mul(d + 1))
    }
}

/// Exponent vectors bounded by `d` per coordinate or in total.
fn monomials(p: usize, d: u32, total_degree: bool) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::with_capacity(p)];
    for _ in 0..p {
        let mut next = Vec::new();
        for a in &out {
            let used: u32 = a.iter().sum();
            let cap = if total_degree { d - used } else { d };
            for k in 0..=cap {
                let mut b = a.clone();
                b.push(k);
                next.push(b);
            }
        }
        out = next;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub k: DenseMatrix,
    pub config: KernelConfig,
    /// Built on Mahalanobis-whitened rather than coordinate-standardized data.
    pub whitened: bool,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.k.rows()
    }
}

/// `K_ij = γ(1 + θ (x_i−μ)ᵀΣ⁻¹(x_j−μ))^d`, evaluated through whitened
/// coordinates.
pub fn gram_poly_mahalanobis(x: &DenseMatrix, cfg: &KernelConfig, moments: &MeanCov) -> Result<GramMatrix> {
    if cfg.family != KernelFamily::PolyMahalanobis {
        return Err(Error::InvalidConfig(format!("expected poly-mahalanobis, got {}", cfg.family)));
    }
    let scales = vec![1.0; x.cols()];
    Whitening::from_parts(x, moments.clone(), scales)?.gram(cfg)
}

/// `K_ij = γ Π_k (1 + θ z_ik z_jk)^d` with `z_ik = (x_ik − μ_k)/σ_k`.
/// Scales are floored at `1e-8·max(1, |μ_k|)`.
pub fn gram_product_poly(
    x: &DenseMatrix,
    cfg: &KernelConfig,
    moments: &MeanCov,
    scales: &[f64],
) -> Result<GramMatrix> {
    if cfg.family != KernelFamily::ProductPoly {
        return Err(Error::InvalidConfig(format!("expected product-poly, got {}", cfg.family)));
    }
    let floored = scales
        .iter()
        .zip(&moments.mean)
        .map(|(s, m)| s.max(1e-8 * m.abs().max(1.0)))
        .collect();
    Whitening::from_parts(x, moments.clone(), floored)?.gram(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdDiagnostic {
    /// Diagonal jitter the factorization needed; infinite if none sufficed.
    pub jitter_used: f64,
    /// `trace/n`, the reference scale for the jitter.
    pub mean_diagonal: f64,
    pub indefinite: bool,
}

/// Jitter above this fraction of `trace/n` marks a Gram as numerically indefinite.
pub const INDEFINITE_JITTER: f64 = 1e-6;

pub fn psd_check(k: &GramMatrix) -> PsdDiagnostic {
    let n = k.n().max(1) as f64;
    let mean_diagonal = k.k.trace() / n;
    let scale = if mean_diagonal > 0.0 { mean_diagonal } else { 1.0 };
    match cholesky(&k.k, 1e-2 * scale) {
        Ok(f) => PsdDiagnostic {
            jitter_used: f.jitter_used,
            mean_diagonal,
            indefinite: f.jitter_used > INDEFINITE_JITTER * scale,
        },
        Err(_) => PsdDiagnostic {
            jitter_used: f64::INFINITY,
            mean_diagonal,
            indefinite: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cloud(n: usize, p: usize, seed: u64) -> DenseMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_vec(n, p, (0..n * p).map(|_| rng.random_range(-2.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn centered_point_gives_gamma() {
        // the mean of a symmetric cloud is one of its points
        let x = DenseMatrix::from_rows(&[[0.0, 0.0], [1.0, 2.0], [-1.0, -2.0], [2.0, -1.0], [-2.0, 1.0]]);
        let w = Whitening::fit(&x).unwrap();
        for d in 1..=4 {
            let g = w.gram(&KernelConfig::new(KernelFamily::PolyMahalanobis, d, 1.7, 0.3)).unwrap();
            assert!((g.k[(0, 0)] - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_whitened_coordinate() {
        // moments of {1, 3}: μ = 2, σ̂² = 2; the point μ + σ̂ has whitened coordinate 1
        let base = DenseMatrix::from_rows(&[[1.0], [3.0]]);
        let moments = sample_mean_cov(&base).unwrap();
        let probe = DenseMatrix::from_rows(&[[2.0 + 2f64.sqrt()]]);
        let w = Whitening::from_parts(&probe, moments, vec![1.0]).unwrap();
        let g = w.gram(&KernelConfig::new(KernelFamily::PolyMahalanobis, 2, 1.0, 1.0)).unwrap();
        // the covariance ridge (1e-8 relative) perturbs the value slightly
        assert!((g.k[(0, 0)] - 4.0).abs() < 1e-7);
    }

    #[test]
    fn degree_one_is_shifted_linear() {
        let x = cloud(15, 3, 7);
        let w = Whitening::fit(&x).unwrap();
        let (gamma, theta) = (2.5, 0.4);
        let g = w.gram(&KernelConfig::new(KernelFamily::PolyMahalanobis, 1, gamma, theta)).unwrap();
        let z = w.whitened();
        let zzt = z.matmul(&z.transpose()).unwrap();
        for i in 0..15 {
            for j in 0..15 {
                let rebuilt = gamma * (1.0 + theta * zzt[(i, j)]);
                assert!((g.k[(i, j)] - rebuilt).abs() < 1e-10);
                assert!((g.k[(i, j)] - gamma * theta * zzt[(i, j)] - gamma).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn product_kernel_one_coordinate_matches_poly() {
        let x = cloud(12, 1, 3);
        let mc = sample_mean_cov(&x).unwrap();
        let sd = vec![(mc.cov[(0, 0)]).sqrt()];
        let prod = gram_product_poly(&x, &KernelConfig::new(KernelFamily::ProductPoly, 2, 1.3, 0.7), &mc, &sd).unwrap();
        let poly = gram_poly_mahalanobis(&x, &KernelConfig::new(KernelFamily::PolyMahalanobis, 2, 1.3, 0.7), &mc).unwrap();
        for (a, b) in prod.k.data().iter().zip(poly.k.data()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn product_kernel_by_hand() {
        let cfg = KernelConfig::new(KernelFamily::ProductPoly, 2, 1.0, 1.0);
        assert_eq!(cfg.eval(&[1.0, 0.0], &[1.0, 1.0]), 4.0);
    }

    #[test]
    fn all_points_at_mean() {
        let x = DenseMatrix::from_rows(&[[2.0, 1.0], [2.0, 1.0], [2.0, 1.0]]);
        let w = Whitening::fit(&x).unwrap();
        for fam in [KernelFamily::ProductPoly, KernelFamily::PolyMahalanobis] {
            let g = w.gram(&KernelConfig::new(fam, 2, 0.9, 1.0)).unwrap();
            assert!(g.k.data().iter().all(|&v| (v - 0.9).abs() < 1e-12));
        }
    }

    #[test]
    fn gaussian_family() {
        let x = cloud(6, 2, 1);
        let w = Whitening::fit(&x).unwrap();
        let g = w.gram(&KernelConfig::new(KernelFamily::Gaussian, 1, 3.0, 0.5)).unwrap();
        assert!(g.k.diagonal().iter().all(|&d| (d - 3.0).abs() < 1e-14));
        assert!(g.k.data().iter().all(|&v| v > 0.0 && v <= 3.0));
    }

    #[test]
    fn subset_gram_is_principal_submatrix() {
        let x = cloud(20, 2, 11);
        let w = Whitening::fit(&x).unwrap();
        let rows = [3, 7, 8, 15, 19];
        for fam in [KernelFamily::PolyMahalanobis, KernelFamily::ProductPoly, KernelFamily::Gaussian] {
            let cfg = KernelConfig::new(fam, 3, 1.1, 0.6);
            let full = w.gram(&cfg).unwrap();
            let sub = w.gram_rows(&rows, &cfg).unwrap();
            assert_eq!(sub.k, full.k.principal_submatrix(&rows));
        }
    }

    #[test]
    fn scale_law_and_symmetry() {
        let x = cloud(25, 3, 5);
        let w = Whitening::fit(&x).unwrap();
        for fam in [KernelFamily::PolyMahalanobis, KernelFamily::ProductPoly, KernelFamily::Gaussian] {
            let a = w.gram(&KernelConfig::new(fam, 2, 1.0, 0.5)).unwrap();
            let b = w.gram(&KernelConfig::new(fam, 2, 4.0, 0.5)).unwrap();
            for (u, v) in a.k.data().iter().zip(b.k.data()) {
                assert_eq!(4.0 * u, *v);
            }
            for i in 0..25 {
                for j in 0..25 {
                    assert!((a.k[(i, j)] - a.k[(j, i)]).abs() <= 1e-12 * (1.0 + a.k[(i, j)].abs()));
                }
            }
        }
    }

    #[test]
    fn psd_diagnostics() {
        let x = cloud(30, 2, 9);
        let w = Whitening::fit(&x).unwrap();
        for fam in [KernelFamily::PolyMahalanobis, KernelFamily::ProductPoly, KernelFamily::Gaussian] {
            let g = w.gram(&KernelConfig::new(fam, 2, 1.0, 1.0)).unwrap();
            let diag = psd_check(&g);
            assert!(!diag.indefinite);
            assert!(diag.jitter_used <= 1e-8 * diag.mean_diagonal, "{fam}: {diag:?}");
        }

        // duplicated row pair: PSD but singular
        let mut rows: Vec<Vec<f64>> = (0..10).map(|i| x.row(i).to_vec()).collect();
        rows.push(rows[0].clone());
        let w = Whitening::fit(&DenseMatrix::from_rows(&rows)).unwrap();
        let g = w.gram(&KernelConfig::new(KernelFamily::Gaussian, 1, 1.0, 1.0)).unwrap();
        assert!(!psd_check(&g).indefinite);

        // three nearly coincident points; flipping one off-diagonal sign
        // leaves an eigenvalue near -1
        let pts = DenseMatrix::from_rows(&[[0.0, 0.0], [0.01, 0.0], [0.0, 0.01], [5.0, 5.0], [-5.0, 4.0]]);
        let w = Whitening::fit(&pts).unwrap();
        let mut g = w.gram(&KernelConfig::new(KernelFamily::Gaussian, 1, 1.0, 1.0)).unwrap();
        let v = -g.k[(0, 1)];
        g.k[(0, 1)] = v;
        g.k[(1, 0)] = v;
        assert!(psd_check(&g).indefinite);
    }

    #[test]
    fn features_reproduce_polynomial_grams() {
        let x = cloud(25, 3, 12);
        let w = Whitening::fit(&x).unwrap();
        let rows = [3, 0, 17, 9, 24, 11];
        for family in [KernelFamily::ProductPoly, KernelFamily::PolyMahalanobis] {
            for d in 1..=3 {
                let cfg = KernelConfig::new(family, d, 1.9, 0.4);
                let phi = w.feature_map(&rows, &cfg, 1000).unwrap().unwrap();
                let expected = match family {
                    KernelFamily::ProductPoly => (d as usize + 1).pow(3),
                    _ => [4, 10, 20][d as usize - 1],
                };
                assert_eq!(phi.cols(), expected);
                let k = w.gram_rows(&rows, &cfg).unwrap().k;
                let rebuilt = phi.matmul(&phi.transpose()).unwrap();
                for a in 0..rows.len() {
                    for b in 0..rows.len() {
                        assert!((k[(a, b)] - rebuilt[(a, b)]).abs() < 1e-10 * k.max_abs(), "{family} d={d}");
                    }
                }
            }
        }
        let gauss = KernelConfig::new(KernelFamily::Gaussian, 1, 1.0, 1.0);
        assert!(w.feature_map(&rows, &gauss, 1000).unwrap().is_none());
        let cfg = KernelConfig::new(KernelFamily::ProductPoly, 2, 1.0, 1.0);
        assert!(w.feature_map(&rows, &cfg, 26).unwrap().is_none());
    }
}
