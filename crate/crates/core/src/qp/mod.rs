//! Convex quadratic programs with linear equalities and box bounds:
//!
//! ```text
//! minimize ½xᵀPx + qᵀx  subject to  A x = b,  l ≤ x ≤ u
//! ```
//!
//! solved by operator splitting (ADMM) with an active-set polish, plus a
//! relax-and-round path for a block of `{0, level}` selection variables.

mod admm;
mod polish;
mod round;

pub use admm::solve;
pub use round::solve_relax_and_round;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf, DenseMatrix};

/// Variables restricted to `{0, level}` with exactly `cardinality` of them at
/// `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryBlock {
    pub mask: Vec<bool>,
    pub level: f64,
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub p: DenseMatrix,
    pub q: Vec<f64>,
    pub a_eq: DenseMatrix,
    pub b_eq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub binary: Option<BinaryBlock>,
}

impl QuadraticProgram {
    /// Unconstrained problem in `m` variables.
    pub fn unconstrained(p: DenseMatrix, q: Vec<f64>) -> Self {
        let m = q.len();
        Self {
            p,
            q,
            a_eq: DenseMatrix::zeros(0, m),
            b_eq: vec![],
            lower: vec![f64::NEG_INFINITY; m],
            upper: vec![f64::INFINITY; m],
            binary: None,
        }
    }

    pub fn with_equalities(mut self, a_eq: DenseMatrix, b_eq: Vec<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    /// `½xᵀPx + qᵀx`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p.matvec(x).expect("dimension checked by validate");
        0.5 * dot(x, &px) + dot(&self.q, x)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        let bad = |msg: String| Err(Error::InvalidProblem(msg));
        if self.p.rows() != m || self.p.cols() != m {
            return bad(format!("P is {}x{}, expected {m}x{m}", self.p.rows(), self.p.cols()));
        }
        if self.a_eq.cols() != m || self.a_eq.rows() != self.b_eq.len() {
            return bad(format!(
                "A_eq is {}x{} with {} right-hand sides for {m} variables",
                self.a_eq.rows(),
                self.a_eq.cols(),
                self.b_eq.len()
            ));
        }
        if self.lower.len() != m || self.upper.len() != m {
            return bad("bound vectors have the wrong length".into());
        }
        if !self.p.is_finite() || !self.a_eq.is_finite() {
            return bad("non-finite matrix entries".into());
        }
        if self.q.iter().chain(&self.b_eq).any(|v| !v.is_finite()) {
            return bad("non-finite vector entries".into());
        }
        let asym = self.p.max_asymmetry();
        if asym > 1e-10 * self.p.max_abs().max(1.0) {
            return bad(format!("P is not symmetric (asymmetry {asym:e})"));
        }
        for j in 0..m {
            let (l, u) = (self.lower[j], self.upper[j]);
            if l.is_nan() || u.is_nan() || l > u || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return bad(format!("invalid bounds [{l}, {u}] on variable {j}"));
            }
        }
        if let Some(b) = &self.binary {
            if b.mask.len() != m {
                return bad("binary mask has the wrong length".into());
            }
            let masked = b.mask.iter().filter(|&&v| v).count();
            if !(b.level > 0.0) || b.cardinality == 0 || b.cardinality > masked {
                return bad(format!(
                    "binary block needs a positive level and 1..={masked} selections, got level {} and {}",
                    b.level, b.cardinality
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    /// Added to the diagonal of P before solving.
    pub psd_jitter: f64,
    pub check_every: usize,
    pub adaptive_rho: bool,
    /// Residual ratio that triggers a step-size update.
    pub adaptive_rho_tolerance: f64,
    pub scaling_iters: usize,
    pub polish: bool,
    /// Re-solves spent on exchanging a selected and an unselected variable
    /// after rounding; 0 keeps the rounded selection.
    pub swap_budget: usize,
    /// Exchanges stop once the rounded objective is within this relative
    /// gap of the relaxation bound.
    pub swap_gap: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_primal: 1e-6,
            eps_dual: 1e-6,
            eps_infeasible: 1e-7,
            max_iter: 100_000,
            psd_jitter: 1e-8,
            check_every: 25,
            adaptive_rho: true,
            adaptive_rho_tolerance: 10.0,
            scaling_iters: 10,
            polish: true,
            swap_budget: 64,
            swap_gap: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Solved,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of the equality rows.
    pub y_eq: Vec<f64>,
    /// Bound multipliers: negative at an active lower bound, positive at an
    /// active upper bound.
    pub y_bound: Vec<f64>,
    /// `½xᵀPx + qᵀx` with the caller's P (no jitter).
    pub objective: f64,
    /// Normalized primal residual, comparable with `eps_primal`.
    pub primal_residual: f64,
    /// Normalized dual residual, comparable with `eps_dual`.
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub polished: bool,
    pub rho_updates: usize,
    /// Relaxation lower bound when the solution came from relax-and-round.
    pub relaxation_objective: Option<f64>,
}

impl QpSolution {
    pub fn is_solved(&self) -> bool {
        self.status == QpStatus::Solved
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `‖Px + q + Aᵀy_eq + y_bound‖∞`.
    pub stationarity: f64,
    pub primal_eq: f64,
    /// Largest bound violation.
    pub primal_bound: f64,
    /// Largest `|y_j|·(distance to the bound it claims)`, plus multipliers
    /// of the wrong sign.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_bound)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(qp: &QuadraticProgram, x: &[f64], y_eq: &[f64], y_bound: &[f64]) -> Result<KktResiduals> {
    let m = qp.dim();
    if x.len() != m || y_bound.len() != m || y_eq.len() != qp.n_eq() {
        return Err(Error::DimensionMismatch(format!(
            "kkt check with x:{}, y_eq:{}, y_bound:{} for m={m}, k={}",
            x.len(),
            y_eq.len(),
            y_bound.len(),
            qp.n_eq()
        )));
    }
    let mut grad = qp.p.matvec(x)?;
    let aty = qp.a_eq.matvec_t(y_eq)?;
    for j in 0..m {
        grad[j] += qp.q[j] + aty[j] + y_bound[j];
    }
    let ax = qp.a_eq.matvec(x)?;
    let primal_eq = ax
        .iter()
        .zip(&qp.b_eq)
        .fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()));
    let mut primal_bound: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for j in 0..m {
        let (l, u) = (qp.lower[j], qp.upper[j]);
        primal_bound = primal_bound.max(l - x[j]).max(x[j] - u);
        let y = y_bound[j];
        let gap = if y < 0.0 {
            // lower bound claimed active
            if l.is_finite() {
                -y * (x[j] - l).abs()
            } else {
                -y
            }
        } else if y > 0.0 {
            if u.is_finite() {
                y * (u - x[j]).abs()
            } else {
                y
            }
        } else {
            0.0
        };
        complementarity = complementarity.max(gap);
    }
    Ok(KktResiduals {
        stationarity: norm_inf(&grad),
        primal_eq,
        primal_bound: primal_bound.max(0.0),
        complementarity,
    })
}

/// Greedy Gram–Schmidt selection of linearly independent equality rows.
/// Returns the kept row indices, or `None` when a dependent row contradicts
/// the kept ones.
pub(crate) fn independent_rows(a: &DenseMatrix, b: &[f64]) -> Option<Vec<usize>> {
    let m = a.cols();
    let mut basis: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut kept = Vec::new();
    for r in 0..a.rows() {
        let row = a.row(r);
        let norm = dot(row, row).sqrt();
        let mut v = row.to_vec();
        let mut rhs = b[r];
        for (q, beta) in &basis {
            let c = dot(q, &v);
            for j in 0..m {
                v[j] -= c * q[j];
            }
            rhs -= c * beta;
        }
        let resid = dot(&v, &v).sqrt();
        if resid <= 1e-10 * norm.max(f64::MIN_POSITIVE) {
            if rhs.abs() > 1e-9 * b[r].abs().max(1.0) {
                return None;
            }
            continue;
        }
        v.iter_mut().for_each(|x| *x /= resid);
        basis.push((v, rhs / resid));
        kept.push(r);
    }
    Some(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> QuadraticProgram {
        QuadraticProgram::unconstrained(DenseMatrix::from_rows(&[[1.0]]), vec![-1.0])
    }

    #[test]
    fn kkt_at_optimum_and_perturbed() {
        let qp = scalar();
        let r = kkt_residuals(&qp, &[1.0], &[], &[0.0]).unwrap();
        assert!(r.max() <= 1e-8);
        let r = kkt_residuals(&qp, &[1.1], &[], &[0.0]).unwrap();
        assert!((r.stationarity - 0.1).abs() < 1e-12);
        assert!(matches!(kkt_residuals(&qp, &[1.0, 2.0], &[], &[0.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn kkt_feasible_but_suboptimal() {
        let qp = QuadraticProgram::unconstrained(DenseMatrix::identity(2), vec![0.0, 0.0])
            .with_equalities(DenseMatrix::from_rows(&[[1.0, 1.0]]), vec![2.0])
            .with_bounds(vec![0.0; 2], vec![f64::INFINITY; 2]);
        let r = kkt_residuals(&qp, &[1.5, 0.5], &[-1.0], &[0.0, 0.0]).unwrap();
        assert!(r.primal_eq < 1e-14 && r.primal_bound == 0.0);
        assert!(r.stationarity > 0.1);
    }

    #[test]
    fn redundant_rows() {
        let a = DenseMatrix::from_rows(&[[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [0.0, 1.0, 1.0]]);
        assert_eq!(independent_rows(&a, &[1.0, 2.0, 3.0]), Some(vec![0, 2]));
        assert_eq!(independent_rows(&a, &[1.0, 2.5, 3.0]), None);
    }

    #[test]
    fn validation_rejects_bad_bounds() {
        let qp = scalar().with_bounds(vec![1.0], vec![0.0]);
        assert!(matches!(qp.validate(), Err(Error::InvalidProblem(_))));
    }
}
