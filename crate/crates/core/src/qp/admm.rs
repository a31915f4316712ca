use super::polish::{polish, Active, Reduced};
use super::{independent_rows, QpSolution, QpStatus, QuadraticProgram, SolverSettings};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, norm_inf, CholeskyFactor, DenseMatrix};

const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;

/// Solves a quadratic program without a binary block.
pub fn solve(qp: &QuadraticProgram, settings: &SolverSettings) -> Result<QpSolution> {
    qp.validate()?;
    validate_settings(settings)?;
    if qp.binary.is_some() {
        return Err(Error::InvalidProblem(
            "binary blocks need the relax-and-round solver".into(),
        ));
    }
    let m = qp.dim();
    if (0..m).any(|j| qp.lower[j] == qp.upper[j]) {
        return solve_without_fixed(qp, settings);
    }
    let Some(rows) = independent_rows(&qp.a_eq, &qp.b_eq) else {
        return Ok(infeasible(qp, 0));
    };
    let reduced = Reduced {
        p: qp.p.clone(),
        q: qp.q.clone(),
        a: qp.a_eq.select_rows(&rows),
        b: rows.iter().map(|&r| qp.b_eq[r]).collect(),
        lower: qp.lower.clone(),
        upper: qp.upper.clone(),
    };
    if m == 0 {
        return Ok(QpSolution {
            x: vec![],
            y_eq: vec![0.0; qp.n_eq()],
            y_bound: vec![],
            objective: 0.0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            iterations: 0,
            status: QpStatus::Solved,
            polished: false,
            rho_updates: 0,
            relaxation_objective: None,
        });
    }

    let mut admm = Admm::new(&reduced, settings)?;
    let outcome = admm.run();

    let (x, y_eq_red, y_bound, polished, status) = match outcome {
        Outcome::Infeasible => return Ok(infeasible(qp, admm.iter)),
        Outcome::Polished(p) => (p.x, p.y_eq, p.y_bound, true, QpStatus::Solved),
        Outcome::Converged | Outcome::MaxIterations => {
            let (mut x, y_eq, y_b) = admm.unscaled_iterate();
            for j in 0..m {
                x[j] = x[j].clamp(qp.lower[j], qp.upper[j]);
            }
            let status = if matches!(outcome, Outcome::Converged) {
                QpStatus::Solved
            } else {
                QpStatus::MaxIterations
            };
            (x, y_eq, y_b, false, status)
        }
    };
    let (primal_residual, dual_residual) = reduced.relative_residuals(&x, &y_eq_red, &y_bound);
    let mut y_eq = vec![0.0; qp.n_eq()];
    for (k, &r) in rows.iter().enumerate() {
        y_eq[r] = y_eq_red[k];
    }
    Ok(QpSolution {
        objective: qp.objective(&x),
        x,
        y_eq,
        y_bound,
        primal_residual,
        dual_residual,
        iterations: admm.iter,
        status,
        polished,
        rho_updates: admm.rho_updates,
        relaxation_objective: None,
    })
}

/// Eliminates variables with equal bounds, solves over the rest, and
/// recovers the multipliers of the eliminated variables from stationarity.
fn solve_without_fixed(qp: &QuadraticProgram, settings: &SolverSettings) -> Result<QpSolution> {
    let m = qp.dim();
    let (free, fixed): (Vec<usize>, Vec<usize>) = (0..m).partition(|&j| qp.lower[j] != qp.upper[j]);
    let mut x = vec![0.0; m];
    for &j in &fixed {
        x[j] = qp.lower[j];
    }
    let px = qp.p.matvec(&x)?;
    let ax = qp.a_eq.matvec(&x)?;
    let b: Vec<f64> = qp.b_eq.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let all_rows: Vec<usize> = (0..qp.n_eq()).collect();
    let sub = QuadraticProgram::unconstrained(
        qp.p.principal_submatrix(&free),
        free.iter().map(|&j| qp.q[j] + px[j]).collect(),
    )
    .with_equalities(qp.a_eq.submatrix(&all_rows, &free), b)
    .with_bounds(
        free.iter().map(|&j| qp.lower[j]).collect(),
        free.iter().map(|&j| qp.upper[j]).collect(),
    );
    let inner = if free.is_empty() {
        if independent_rows(&sub.a_eq, &sub.b_eq).is_none() {
            return Ok(infeasible(qp, 0));
        }
        QpSolution {
            x: vec![],
            y_eq: vec![0.0; qp.n_eq()],
            y_bound: vec![],
            objective: 0.0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            iterations: 0,
            status: QpStatus::Solved,
            polished: false,
            rho_updates: 0,
            relaxation_objective: None,
        }
    } else {
        solve(&sub, settings)?
    };
    if inner.status == QpStatus::Infeasible {
        return Ok(infeasible(qp, inner.iterations));
    }
    let mut y_bound = vec![0.0; m];
    for (k, &j) in free.iter().enumerate() {
        x[j] = inner.x[k];
        y_bound[j] = inner.y_bound[k];
    }
    let px = qp.p.matvec(&x)?;
    let aty = qp.a_eq.matvec_t(&inner.y_eq)?;
    for &j in &fixed {
        y_bound[j] = -(px[j] + qp.q[j] + aty[j]);
    }
    Ok(QpSolution {
        objective: qp.objective(&x),
        x,
        y_bound,
        ..inner
    })
}

fn validate_settings(s: &SolverSettings) -> Result<()> {
    let ok = s.rho > 0.0
        && s.sigma > 0.0
        && s.alpha > 0.0
        && s.alpha < 2.0
        && s.eps_primal > 0.0
        && s.eps_dual > 0.0
        && s.eps_infeasible > 0.0
        && s.psd_jitter >= 0.0
        && s.swap_gap >= 0.0
        && s.check_every > 0
        && s.adaptive_rho_tolerance > 1.0;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("invalid solver settings {s:?}")))
    }
}

fn infeasible(qp: &QuadraticProgram, iterations: usize) -> QpSolution {
    let m = qp.dim();
    QpSolution {
        x: vec![f64::NAN; m],
        y_eq: vec![f64::NAN; qp.n_eq()],
        y_bound: vec![f64::NAN; m],
        objective: f64::NAN,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        iterations,
        status: QpStatus::Infeasible,
        polished: false,
        rho_updates: 0,
        relaxation_objective: None,
    }
}

impl Reduced {
    /// Primal and dual residuals normalized as in the termination test.
    pub(crate) fn relative_residuals(&self, x: &[f64], y_eq: &[f64], y_b: &[f64]) -> (f64, f64) {
        let ax = self.a.matvec(x).expect("shapes checked");
        let mut prim: f64 = 0.0;
        for (a, b) in ax.iter().zip(&self.b) {
            prim = prim.max((a - b).abs());
        }
        for j in 0..x.len() {
            prim = prim.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        let prim_scale = norm_inf(&ax).max(norm_inf(x)).max(1.0);
        let px = self.p.matvec(x).expect("shapes checked");
        let mut aty = self.a.matvec_t(y_eq).expect("shapes checked");
        for (v, y) in aty.iter_mut().zip(y_b) {
            *v += y;
        }
        let dual = px
            .iter()
            .zip(&aty)
            .zip(&self.q)
            .fold(0.0f64, |acc, ((p, a), q)| acc.max((p + a + q).abs()));
        let dual_scale = norm_inf(&px).max(norm_inf(&aty)).max(norm_inf(&self.q)).max(1.0);
        (prim / prim_scale, dual / dual_scale)
    }
}

enum Outcome {
    Converged,
    Polished(super::polish::Polished),
    MaxIterations,
    Infeasible,
}

/// Ruiz-equilibrated problem data and the ADMM iterates.
struct Admm<'a> {
    prob: &'a Reduced,
    settings: &'a SolverSettings,
    m: usize,
    k: usize,
    // scaling: x = D x̄, row r of the equalities scaled by e_eq, box rows by e_box
    d: Vec<f64>,
    e_eq: Vec<f64>,
    e_box: Vec<f64>,
    c: f64,
    p: DenseMatrix,
    q: Vec<f64>,
    a: DenseMatrix,
    b: Vec<f64>,
    box_diag: Vec<f64>,
    l: Vec<f64>,
    u: Vec<f64>,
    rho: f64,
    rho_eq: Vec<f64>,
    rho_box: Vec<f64>,
    factor: CholeskyFactor,
    x: Vec<f64>,
    z_eq: Vec<f64>,
    z_box: Vec<f64>,
    y_eq: Vec<f64>,
    y_box: Vec<f64>,
    dy_eq: Vec<f64>,
    dy_box: Vec<f64>,
    iter: usize,
    rho_updates: usize,
}

impl<'a> Admm<'a> {
    fn new(prob: &'a Reduced, settings: &'a SolverSettings) -> Result<Self> {
        let m = prob.q.len();
        let k = prob.b.len();
        let mut p = prob.p.clone();
        p.add_diagonal(settings.psd_jitter);
        let (d, e_eq, e_box) = ruiz(&p, &prob.a, settings.scaling_iters);

        for i in 0..m {
            for j in 0..m {
                p[(i, j)] *= d[i] * d[j];
            }
        }
        let mut q: Vec<f64> = prob.q.iter().zip(&d).map(|(q, d)| q * d).collect();
        let mean_col = (0..m)
            .map(|j| (0..m).fold(0.0f64, |acc, i| acc.max(p[(i, j)].abs())))
            .sum::<f64>()
            / m as f64;
        let cost = limit(mean_col.max(norm_inf(&q)));
        let c = (1.0 / cost).clamp(MIN_SCALING, MAX_SCALING);
        p.scale(c);
        q.iter_mut().for_each(|v| *v *= c);

        let mut a = prob.a.clone();
        for r in 0..k {
            for j in 0..m {
                a[(r, j)] *= e_eq[r] * d[j];
            }
        }
        let b: Vec<f64> = prob.b.iter().zip(&e_eq).map(|(b, e)| b * e).collect();
        let box_diag: Vec<f64> = e_box.iter().zip(&d).map(|(e, d)| e * d).collect();
        let l: Vec<f64> = prob.lower.iter().zip(&e_box).map(|(l, e)| l * e).collect();
        let u: Vec<f64> = prob.upper.iter().zip(&e_box).map(|(u, e)| u * e).collect();

        let mut admm = Self {
            prob,
            settings,
            m,
            k,
            d,
            e_eq,
            e_box,
            c,
            p,
            q,
            a,
            b,
            box_diag,
            l,
            u,
            rho: settings.rho,
            rho_eq: vec![],
            rho_box: vec![],
            factor: CholeskyFactor {
                l: DenseMatrix::zeros(0, 0),
                jitter_used: 0.0,
            },
            x: vec![0.0; m],
            z_eq: vec![0.0; k],
            z_box: vec![0.0; m],
            y_eq: vec![0.0; k],
            y_box: vec![0.0; m],
            dy_eq: vec![0.0; k],
            dy_box: vec![0.0; m],
            iter: 0,
            rho_updates: 0,
        };
        admm.set_rho(settings.rho)?;
        Ok(admm)
    }

    fn set_rho(&mut self, rho: f64) -> Result<()> {
        self.rho = rho.clamp(RHO_MIN, RHO_MAX);
        self.rho_eq = vec![RHO_EQ_FACTOR * self.rho; self.k];
        self.rho_box = (0..self.m)
            .map(|j| {
                let (l, u) = (self.l[j], self.u[j]);
                if l == u {
                    RHO_EQ_FACTOR * self.rho
                } else if l.is_infinite() && u.is_infinite() {
                    RHO_MIN
                } else {
                    self.rho
                }
            })
            .collect();
        let mut kkt = self.p.clone();
        kkt.add_diagonal(self.settings.sigma);
        for r in 0..self.k {
            let row = self.a.row(r).to_vec();
            let w = self.rho_eq[r];
            for i in 0..self.m {
                let wi = w * row[i];
                if wi == 0.0 {
                    continue;
                }
                let target = kkt.row_mut(i);
                for j in 0..self.m {
                    target[j] += wi * row[j];
                }
            }
        }
        for j in 0..self.m {
            kkt[(j, j)] += self.rho_box[j] * self.box_diag[j] * self.box_diag[j];
        }
        kkt.symmetrize();
        let scale = kkt.trace() / self.m as f64;
        self.factor = cholesky(&kkt, 1e-6 * scale.max(1.0))?;
        Ok(())
    }

    fn step(&mut self) {
        let (m, k) = (self.m, self.k);
        let alpha = self.settings.alpha;
        let sigma = self.settings.sigma;
        let mut rhs: Vec<f64> = (0..m).map(|j| sigma * self.x[j] - self.q[j]).collect();
        for r in 0..k {
            let coef = self.rho_eq[r] * self.z_eq[r] - self.y_eq[r];
            for (v, a) in rhs.iter_mut().zip(self.a.row(r)) {
                *v += a * coef;
            }
        }
        for j in 0..m {
            rhs[j] += self.box_diag[j] * (self.rho_box[j] * self.z_box[j] - self.y_box[j]);
        }
        self.factor.solve_in_place(&mut rhs);
        let xt = rhs;

        for j in 0..m {
            self.x[j] = alpha * xt[j] + (1.0 - alpha) * self.x[j];
        }
        for r in 0..k {
            let zt = dot(self.a.row(r), &xt);
            let v = alpha * zt + (1.0 - alpha) * self.z_eq[r];
            let z_new = self.b[r];
            let dy = self.rho_eq[r] * (v - z_new);
            self.y_eq[r] += dy;
            self.dy_eq[r] = dy;
            self.z_eq[r] = z_new;
        }
        for j in 0..m {
            let zt = self.box_diag[j] * xt[j];
            let v = alpha * zt + (1.0 - alpha) * self.z_box[j];
            let z_new = (v + self.y_box[j] / self.rho_box[j]).clamp(self.l[j], self.u[j]);
            let dy = self.rho_box[j] * (v - z_new);
            self.y_box[j] += dy;
            self.dy_box[j] = dy;
            self.z_box[j] = z_new;
        }
        self.iter += 1;
    }

    /// Scaled-space relative residuals and the step-size ratio estimate.
    fn scaled_balance(&self) -> f64 {
        let ax: Vec<f64> = (0..self.k).map(|r| dot(self.a.row(r), &self.x)).collect();
        let bx: Vec<f64> = (0..self.m).map(|j| self.box_diag[j] * self.x[j]).collect();
        let mut prim: f64 = 0.0;
        for r in 0..self.k {
            prim = prim.max((ax[r] - self.z_eq[r]).abs());
        }
        for j in 0..self.m {
            prim = prim.max((bx[j] - self.z_box[j]).abs());
        }
        let prim_scale = norm_inf(&ax)
            .max(norm_inf(&bx))
            .max(norm_inf(&self.z_eq))
            .max(norm_inf(&self.z_box))
            .max(1e-30);
        let px = self.p.matvec(&self.x).expect("square");
        let mut aty = self.a.matvec_t(&self.y_eq).expect("shapes");
        for j in 0..self.m {
            aty[j] += self.box_diag[j] * self.y_box[j];
        }
        let dual = (0..self.m).fold(0.0f64, |acc, j| acc.max((px[j] + self.q[j] + aty[j]).abs()));
        let dual_scale = norm_inf(&px).max(norm_inf(&aty)).max(norm_inf(&self.q)).max(1e-30);
        ((prim / prim_scale) / (dual / dual_scale).max(1e-30)).sqrt()
    }

    fn unscaled_iterate(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x = (0..self.m).map(|j| self.d[j] * self.x[j]).collect();
        let y_eq = (0..self.k).map(|r| self.e_eq[r] * self.y_eq[r] / self.c).collect();
        let y_box = (0..self.m).map(|j| self.e_box[j] * self.y_box[j] / self.c).collect();
        (x, y_eq, y_box)
    }

    fn unscaled_residuals(&self) -> (f64, f64) {
        let (x, y_eq, y_box) = self.unscaled_iterate();
        // use the splitting variable so the box part measures x against z
        let mut prim: f64 = 0.0;
        let mut prim_scale: f64 = 1.0;
        for r in 0..self.k {
            let ax = dot(self.a.row(r), &self.x) / self.e_eq[r];
            let z = self.z_eq[r] / self.e_eq[r];
            prim = prim.max((ax - z).abs());
            prim_scale = prim_scale.max(ax.abs()).max(z.abs());
        }
        for j in 0..self.m {
            let z = self.z_box[j] / self.e_box[j];
            prim = prim.max((x[j] - z).abs());
            prim_scale = prim_scale.max(x[j].abs()).max(z.abs());
        }
        let px = self.prob.p.matvec(&x).expect("square");
        let mut aty = self.prob.a.matvec_t(&y_eq).expect("shapes");
        for j in 0..self.m {
            aty[j] += y_box[j];
        }
        let dual = (0..self.m).fold(0.0f64, |acc, j| acc.max((px[j] + self.prob.q[j] + aty[j]).abs()));
        let dual_scale = norm_inf(&px).max(norm_inf(&aty)).max(norm_inf(&self.prob.q)).max(1.0);
        (prim / prim_scale, dual / dual_scale)
    }

    fn certifies_infeasibility(&self) -> bool {
        let eps = self.settings.eps_infeasible;
        let dy_eq: Vec<f64> = (0..self.k).map(|r| self.e_eq[r] * self.dy_eq[r]).collect();
        let dy_box: Vec<f64> = (0..self.m).map(|j| self.e_box[j] * self.dy_box[j]).collect();
        let norm = norm_inf(&dy_eq).max(norm_inf(&dy_box));
        if !(norm > 1e-30) {
            return false;
        }
        let mut aty = self.prob.a.matvec_t(&dy_eq).expect("shapes");
        for j in 0..self.m {
            aty[j] += dy_box[j];
        }
        if norm_inf(&aty) > eps * norm {
            return false;
        }
        let mut support = dot(&self.prob.b, &dy_eq);
        for j in 0..self.m {
            let y = dy_box[j];
            if y.abs() <= eps * norm {
                continue;
            }
            let bound = if y > 0.0 { self.prob.upper[j] } else { self.prob.lower[j] };
            if bound.is_infinite() {
                return false;
            }
            support += bound * y;
        }
        support < -eps * norm
    }

    fn active_guess(&self) -> Vec<Active> {
        (0..self.m)
            .map(|j| {
                let (l, u, z, y) = (self.l[j], self.u[j], self.z_box[j], self.y_box[j]);
                if l == u {
                    Active::Fixed
                } else if l.is_finite() && z - l < -y {
                    Active::Lower
                } else if u.is_finite() && u - z < y {
                    Active::Upper
                } else {
                    Active::Free
                }
            })
            .collect()
    }

    fn try_polish(&self) -> Option<super::polish::Polished> {
        let guess = self.active_guess();
        let tol = 1e-6 * self.settings.eps_primal.min(self.settings.eps_dual);
        let polished = polish(self.prob, guess, tol)?;
        let (prim, dual) = self
            .prob
            .relative_residuals(&polished.x, &polished.y_eq, &polished.y_bound);
        (prim <= self.settings.eps_primal && dual <= self.settings.eps_dual).then_some(polished)
    }

    fn run(&mut self) -> Outcome {
        let s = *self.settings;
        let mut polish_gate = 1e-3f64.max(s.eps_primal.max(s.eps_dual));
        loop {
            self.step();
            let at_check = self.iter == 1 || self.iter % s.check_every == 0 || self.iter >= s.max_iter;
            if !at_check {
                continue;
            }
            let (prim, dual) = self.unscaled_residuals();
            if !prim.is_finite() || !dual.is_finite() {
                return Outcome::MaxIterations;
            }
            let converged = prim <= s.eps_primal && dual <= s.eps_dual;
            if s.polish && (converged || prim.max(dual) <= polish_gate) {
                if let Some(p) = self.try_polish() {
                    return Outcome::Polished(p);
                }
                polish_gate = (polish_gate * 0.1).max(s.eps_primal.min(s.eps_dual));
            }
            if converged {
                return Outcome::Converged;
            }
            if prim > 1e3 * s.eps_primal && self.certifies_infeasibility() {
                return Outcome::Infeasible;
            }
            if self.iter >= s.max_iter {
                return Outcome::MaxIterations;
            }
            if s.adaptive_rho {
                let ratio = self.scaled_balance();
                if ratio.is_finite() && ratio > 0.0 {
                    let target = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
                    let change = target / self.rho;
                    if change > s.adaptive_rho_tolerance || change < 1.0 / s.adaptive_rho_tolerance {
                        // keep the scaled dual variables; z is unchanged
                        if self.set_rho(target).is_ok() {
                            self.rho_updates += 1;
                        }
                    }
                }
            }
        }
    }
}

fn limit(v: f64) -> f64 {
    if v < MIN_SCALING {
        1.0
    } else {
        v.min(MAX_SCALING)
    }
}

/// Ruiz equilibration of `[[P, Aᵀ], [A, 0]]` with the box rows `I` stacked
/// under `A`.
fn ruiz(p: &DenseMatrix, a: &DenseMatrix, iters: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = p.rows();
    let k = a.rows();
    let mut d = vec![1.0; m];
    let mut e_eq = vec![1.0; k];
    let mut e_box = vec![1.0; m];
    for _ in 0..iters {
        let mut col = vec![0.0f64; m];
        for i in 0..m {
            let row = p.row(i);
            for j in 0..m {
                col[j] = col[j].max((d[i] * row[j] * d[j]).abs());
            }
        }
        let mut row_eq = vec![0.0f64; k];
        for r in 0..k {
            let row = a.row(r);
            for j in 0..m {
                let v = (e_eq[r] * row[j] * d[j]).abs();
                col[j] = col[j].max(v);
                row_eq[r] = row_eq[r].max(v);
            }
        }
        for j in 0..m {
            let v = (e_box[j] * d[j]).abs();
            col[j] = col[j].max(v);
            e_box[j] /= limit(v).sqrt();
        }
        for j in 0..m {
            d[j] /= limit(col[j]).sqrt();
        }
        for r in 0..k {
            e_eq[r] /= limit(row_eq[r]).sqrt();
        }
    }
    (d, e_eq, e_box)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::kkt_residuals;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Augmented Lagrangian outer loop around accelerated projected gradient.
    fn oracle(qp: &QuadraticProgram) -> Vec<f64> {
        let m = qp.dim();
        let mu = 10.0;
        let mut hess = qp.p.clone();
        for r in 0..qp.n_eq() {
            let row = qp.a_eq.row(r);
            for i in 0..m {
                for j in 0..m {
                    hess[(i, j)] += mu * row[i] * row[j];
                }
            }
        }
        let mut v = vec![1.0; m];
        let mut lmax = 1.0;
        for _ in 0..500 {
            let hv = hess.matvec(&v).unwrap();
            lmax = norm_inf(&hv).max(1e-12);
            v = hv.iter().map(|x| x / lmax).collect();
        }
        let step = 1.0 / (1.05 * lmax);
        let project = |x: &mut [f64]| {
            for j in 0..m {
                x[j] = x[j].clamp(qp.lower[j], qp.upper[j]);
            }
        };
        let mut x = vec![0.0; m];
        project(&mut x);
        let mut y = vec![0.0; qp.n_eq()];
        for _ in 0..200 {
            let mut z = x.clone();
            let mut t = 1.0f64;
            for _ in 0..4000 {
                let px = qp.p.matvec(&z).unwrap();
                let ax = qp.a_eq.matvec(&z).unwrap();
                let r: Vec<f64> = (0..qp.n_eq()).map(|i| y[i] + mu * (ax[i] - qp.b_eq[i])).collect();
                let atr = qp.a_eq.matvec_t(&r).unwrap();
                let mut next: Vec<f64> = (0..m).map(|j| z[j] - step * (px[j] + qp.q[j] + atr[j])).collect();
                project(&mut next);
                let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
                z = (0..m).map(|j| next[j] + (t - 1.0) / t_next * (next[j] - x[j])).collect();
                x = next;
                t = t_next;
            }
            let ax = qp.a_eq.matvec(&x).unwrap();
            for i in 0..qp.n_eq() {
                y[i] += mu * (ax[i] - qp.b_eq[i]);
            }
        }
        x
    }

    fn random_qp(rng: &mut ChaCha8Rng, m: usize, k: usize) -> QuadraticProgram {
        let mut b = DenseMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                b[(i, j)] = rng.random_range(-1.0..1.0);
            }
        }
        let mut p = b.matmul(&b.transpose()).unwrap();
        p.add_diagonal(0.1);
        p.symmetrize();
        let q = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut a = DenseMatrix::zeros(k, m);
        for r in 0..k {
            for j in 0..m {
                a[(r, j)] = rng.random_range(0.2..1.0);
            }
        }
        // feasible point inside the box
        let x0: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..0.9)).collect();
        let b_eq = a.matvec(&x0).unwrap();
        let upper = (0..m).map(|j| if j % 3 == 0 { 1.0 } else { f64::INFINITY }).collect();
        QuadraticProgram::unconstrained(p, q)
            .with_equalities(a, b_eq)
            .with_bounds(vec![0.0; m], upper)
    }

    fn simplex_projection(c: &[f64]) -> Vec<f64> {
        let mut s = c.to_vec();
        s.sort_by(|a, b| b.total_cmp(a));
        let mut cum = 0.0;
        let mut tau = 0.0;
        for (i, v) in s.iter().enumerate() {
            cum += v;
            let t = (cum - 1.0) / (i + 1) as f64;
            if v - t > 0.0 {
                tau = t;
            }
        }
        c.iter().map(|v| (v - tau).max(0.0)).collect()
    }

    #[test]
    fn scalar_unconstrained() {
        let qp = QuadraticProgram::unconstrained(DenseMatrix::from_rows(&[[1.0]]), vec![-1.0]);
        let s = solve(&qp, &SolverSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Solved);
        assert!((s.x[0] - 1.0).abs() < 1e-6);
        assert!((s.objective + 0.5).abs() < 1e-6);
    }

    #[test]
    fn matches_simplex_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [2usize, 5, 9, 20] {
            let c: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.5)).collect();
            let qp = QuadraticProgram::unconstrained(DenseMatrix::identity(m), c.iter().map(|v| -v).collect())
                .with_equalities(DenseMatrix::from_vec(1, m, vec![1.0; m]).unwrap(), vec![1.0])
                .with_bounds(vec![0.0; m], vec![f64::INFINITY; m]);
            let s = solve(&qp, &SolverSettings::default()).unwrap();
            assert!(s.is_solved());
            let want = simplex_projection(&c);
            for j in 0..m {
                assert!((s.x[j] - want[j]).abs() < 1e-6, "m={m} j={j}: {} vs {}", s.x[j], want[j]);
            }
        }
    }

    #[test]
    fn matches_augmented_lagrangian_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..12 {
            let m = 3 + case % 6;
            let k = 1 + case % 2;
            let qp = random_qp(&mut rng, m, k);
            let s = solve(&qp, &SolverSettings::default()).unwrap();
            assert!(s.is_solved(), "case {case}: {:?}", s.status);
            let x_ref = oracle(&qp);
            let f_ref = qp.objective(&x_ref);
            assert!(
                (s.objective - f_ref).abs() <= 1e-6 * f_ref.abs().max(1.0),
                "case {case}: {} vs {f_ref}",
                s.objective
            );
            for j in 0..m {
                assert!((s.x[j] - x_ref[j]).abs() < 1e-4, "case {case} coordinate {j}");
            }
            let r = kkt_residuals(&qp, &s.x, &s.y_eq, &s.y_bound).unwrap();
            assert!(r.max() < 1e-5, "case {case}: {r:?}");
        }
    }

    #[test]
    fn multiplier_signs() {
        let lower = QuadraticProgram::unconstrained(DenseMatrix::identity(1), vec![1.0])
            .with_bounds(vec![0.0], vec![f64::INFINITY]);
        let s = solve(&lower, &SolverSettings::default()).unwrap();
        assert!(s.x[0].abs() < 1e-8 && s.y_bound[0] < 0.0);
        let upper = QuadraticProgram::unconstrained(DenseMatrix::identity(1), vec![-1.0])
            .with_bounds(vec![f64::NEG_INFINITY], vec![0.0]);
        let s = solve(&upper, &SolverSettings::default()).unwrap();
        assert!(s.x[0].abs() < 1e-8 && s.y_bound[0] > 0.0);
    }

    #[test]
    fn detects_infeasibility() {
        let qp = QuadraticProgram::unconstrained(DenseMatrix::identity(2), vec![0.0, 0.0])
            .with_equalities(DenseMatrix::from_rows(&[[1.0, 1.0]]), vec![-1.0])
            .with_bounds(vec![0.0; 2], vec![f64::INFINITY; 2]);
        let s = solve(&qp, &SolverSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);

        let inconsistent = QuadraticProgram::unconstrained(DenseMatrix::identity(2), vec![0.0, 0.0])
            .with_equalities(DenseMatrix::from_rows(&[[1.0, 1.0], [2.0, 2.0]]), vec![1.0, 3.0]);
        assert_eq!(solve(&inconsistent, &SolverSettings::default()).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        let qp = QuadraticProgram::unconstrained(DenseMatrix::identity(2), vec![0.0, 0.0])
            .with_equalities(DenseMatrix::from_rows(&[[1.0, 1.0], [2.0, 2.0]]), vec![1.0, 2.0]);
        let s = solve(&qp, &SolverSettings::default()).unwrap();
        assert!(s.is_solved());
        assert!((s.x[0] - 0.5).abs() < 1e-7 && (s.x[1] - 0.5).abs() < 1e-7);
        assert_eq!(s.y_eq[1], 0.0);
    }

    #[test]
    fn equal_bounds_pin_variables() {
        let qp = QuadraticProgram::unconstrained(DenseMatrix::identity(3), vec![-1.0, -1.0, -1.0])
            .with_equalities(DenseMatrix::from_rows(&[[1.0, 1.0, 1.0]]), vec![3.0])
            .with_bounds(vec![0.0, 0.0, 0.0], vec![f64::INFINITY, f64::INFINITY, 0.0]);
        let s = solve(&qp, &SolverSettings::default()).unwrap();
        assert!(s.is_solved());
        assert_eq!(s.x[2], 0.0);
        assert!((s.x[0] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qp = random_qp(&mut rng, 8, 2);
        let a = solve(&qp, &SolverSettings::default()).unwrap();
        let b = solve(&qp, &SolverSettings::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unpolished_iterations_also_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let qp = random_qp(&mut rng, 7, 1);
        let settings = SolverSettings {
            polish: false,
            ..SolverSettings::default()
        };
        let s = solve(&qp, &settings).unwrap();
        assert!(s.is_solved() && !s.polished);
        let x_ref = oracle(&qp);
        assert!((s.objective - qp.objective(&x_ref)).abs() < 1e-5);
    }
}
