use super::independent_rows;
use crate::linalg::{cholesky, dot, norm_inf, CholeskyFactor, DenseMatrix};

const MAX_ROUNDS: usize = 30;
const REFINEMENT_STEPS: usize = 3;

/// Problem data in the caller's units with independent equality rows.
#[derive(Debug, Clone)]
pub(crate) struct Reduced {
    pub p: DenseMatrix,
    pub q: Vec<f64>,
    pub a: DenseMatrix,
    pub b: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Active {
    Free,
    Lower,
    Upper,
    Fixed,
}

#[derive(Debug, Clone)]
pub(crate) struct Polished {
    pub x: Vec<f64>,
    pub y_eq: Vec<f64>,
    pub y_bound: Vec<f64>,
}

/// Equality-constrained solve on a guessed active set, followed by
/// primal-dual active-set corrections.
pub(crate) fn polish(prob: &Reduced, mut active: Vec<Active>, tol: f64) -> Option<Polished> {
    let m = prob.q.len();
    let mut seen: Vec<Vec<Active>> = Vec::new();
    let mut last_count = usize::MAX;
    let mut best_count = usize::MAX;
    let mut limit = usize::MAX;
    for _ in 0..MAX_ROUNDS {
        let (x, y_eq) = match solve_on(prob, &active) {
            Ok(sol) => sol,
            Err(Failure::Inconsistent) => {
                let next = release_pinned_rows(prob, &active)?;
                if seen.contains(&next) {
                    return None;
                }
                seen.push(active);
                active = next;
                continue;
            }
            Err(Failure::Numerical) => return None,
        };
        let mut grad = prob.p.matvec(&x).ok()?;
        let aty = prob.a.matvec_t(&y_eq).ok()?;
        for j in 0..m {
            grad[j] += prob.q[j] + aty[j];
        }
        let scale_x = 1.0 + norm_inf(&x);
        let scale_y = 1.0 + norm_inf(&grad).max(norm_inf(&prob.q));
        // (relative violation, index, new state)
        let mut moves: Vec<(f64, usize, Active)> = Vec::new();
        for j in 0..m {
            match active[j] {
                Active::Free => {
                    if x[j] < prob.lower[j] - tol * scale_x {
                        moves.push(((prob.lower[j] - x[j]) / scale_x, j, Active::Lower));
                    } else if x[j] > prob.upper[j] + tol * scale_x {
                        moves.push(((x[j] - prob.upper[j]) / scale_x, j, Active::Upper));
                    }
                }
                // y = -grad must be <= 0 at a lower bound
                Active::Lower if grad[j] < -tol * scale_y => moves.push((-grad[j] / scale_y, j, Active::Free)),
                Active::Upper if grad[j] > tol * scale_y => moves.push((grad[j] / scale_y, j, Active::Free)),
                _ => {}
            }
        }
        if moves.is_empty() {
            let mut x = x;
            let mut y_bound = vec![0.0; m];
            for j in 0..m {
                match active[j] {
                    Active::Free => x[j] = x[j].clamp(prob.lower[j], prob.upper[j]),
                    _ => y_bound[j] = -grad[j],
                }
            }
            return Some(Polished { x, y_eq, y_bound });
        }
        moves.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if moves.len() > best_count.saturating_mul(4).saturating_add(4) {
            return None;
        }
        best_count = best_count.min(moves.len());
        // damp the update when violations stop shrinking or a set repeats
        if moves.len() >= last_count {
            limit = (limit.min(moves.len()) / 2).max(1);
        }
        last_count = moves.len();
        let mut take = moves.len().min(limit);
        let next = loop {
            let mut next = active.clone();
            for &(_, j, state) in &moves[..take] {
                next[j] = state;
            }
            if !seen.contains(&next) {
                break next;
            }
            if take == 1 {
                return None;
            }
            take = take.div_ceil(2);
        };
        seen.push(active);
        active = next;
    }
    None
}

enum Failure {
    /// An equality row cannot hold with the bound variables as guessed.
    Inconsistent,
    Numerical,
}

/// Frees the bound variables of every equality row left without a free
/// column, or `None` when there is nothing to free.
fn release_pinned_rows(prob: &Reduced, active: &[Active]) -> Option<Vec<Active>> {
    let mut next = active.to_vec();
    let mut released = false;
    for r in 0..prob.a.rows() {
        let row = prob.a.row(r);
        let has_free = (0..row.len()).any(|j| row[j] != 0.0 && active[j] == Active::Free);
        if has_free {
            continue;
        }
        for j in 0..row.len() {
            if row[j] != 0.0 && matches!(active[j], Active::Lower | Active::Upper) {
                next[j] = Active::Free;
                released = true;
            }
        }
    }
    released.then_some(next)
}

fn solve_on(prob: &Reduced, active: &[Active]) -> Result<(Vec<f64>, Vec<f64>), Failure> {
    let m = prob.q.len();
    let mut x = vec![0.0; m];
    let mut free = Vec::new();
    for j in 0..m {
        match active[j] {
            Active::Free => free.push(j),
            Active::Lower | Active::Fixed => x[j] = prob.lower[j],
            Active::Upper => x[j] = prob.upper[j],
        }
        if !x[j].is_finite() {
            return Err(Failure::Numerical);
        }
    }
    let nf = free.len();
    let px = prob.p.matvec(&x).map_err(|_| Failure::Numerical)?;
    let g: Vec<f64> = free.iter().map(|&j| prob.q[j] + px[j]).collect();
    let ax = prob.a.matvec(&x).map_err(|_| Failure::Numerical)?;
    let rhs_b: Vec<f64> = prob.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let a_f = prob.a.submatrix(&(0..prob.a.rows()).collect::<Vec<_>>(), &free);

    // rows that lost all their free columns must already hold
    let rows = independent_rows(&a_f, &rhs_b).ok_or(Failure::Inconsistent)?;
    let a_r = a_f.select_rows(&rows);
    let b_r: Vec<f64> = rows.iter().map(|&r| rhs_b[r]).collect();
    let k = rows.len();

    let h = prob.p.principal_submatrix(&free);
    let mut h_reg = h.clone();
    let diag_scale = if nf == 0 { 1.0 } else { (h.trace() / nf as f64).abs().max(1.0) };
    h_reg.add_diagonal(1e-12 * diag_scale);
    let hf = cholesky(&h_reg, 1e-6 * diag_scale).map_err(|_| Failure::Numerical)?;

    // Y = H⁻¹ A_rᵀ, S = A_r Y
    let mut y_cols = Vec::with_capacity(k);
    for r in 0..k {
        let mut col = a_r.row(r).to_vec();
        hf.solve_in_place(&mut col);
        y_cols.push(col);
    }
    let mut s = DenseMatrix::zeros(k, k);
    for r in 0..k {
        for c in 0..k {
            s[(r, c)] = dot(a_r.row(r), &y_cols[c]);
        }
    }
    s.symmetrize();
    let s_scale = if k == 0 { 1.0 } else { (s.trace() / k as f64).abs().max(1e-300) };
    let sf = cholesky(&s, 1e-8 * s_scale).map_err(|_| Failure::Numerical)?;

    let kkt_solve = |r1: &[f64], r2: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut h1 = r1.to_vec();
        hf.solve_in_place(&mut h1);
        let mut nu: Vec<f64> = (0..k).map(|r| dot(a_r.row(r), &h1) - r2[r]).collect();
        solve_factor(&sf, &mut nu);
        let mut xf = h1;
        for r in 0..k {
            for (v, yc) in xf.iter_mut().zip(&y_cols[r]) {
                *v -= nu[r] * yc;
            }
        }
        (xf, nu)
    };

    let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
    let (mut xf, mut nu) = kkt_solve(&neg_g, &b_r);
    for _ in 0..REFINEMENT_STEPS {
        let hx = h.matvec(&xf).map_err(|_| Failure::Numerical)?;
        let atn = a_r.matvec_t(&nu).map_err(|_| Failure::Numerical)?;
        let r1: Vec<f64> = (0..nf).map(|i| neg_g[i] - hx[i] - atn[i]).collect();
        let axf = a_r.matvec(&xf).map_err(|_| Failure::Numerical)?;
        let r2: Vec<f64> = (0..k).map(|r| b_r[r] - axf[r]).collect();
        if norm_inf(&r1).max(norm_inf(&r2)) == 0.0 {
            break;
        }
        let (dx, dn) = kkt_solve(&r1, &r2);
        xf.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        nu.iter_mut().zip(&dn).for_each(|(a, b)| *a += b);
    }
    for (i, &j) in free.iter().enumerate() {
        x[j] = xf[i];
    }
    let mut y_eq = vec![0.0; prob.b.len()];
    for (i, &r) in rows.iter().enumerate() {
        y_eq[r] = nu[i];
    }
    if x.iter().chain(&y_eq).any(|v| !v.is_finite()) {
        return Err(Failure::Numerical);
    }
    Ok((x, y_eq))
}

fn solve_factor(f: &CholeskyFactor, b: &mut [f64]) {
    if !b.is_empty() {
        f.solve_in_place(b);
    }
}
