//! Independent reference computations shared by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use kom_core::linalg::DenseMatrix;
use kom_core::qp::QuadraticProgram;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A QP whose equality rows are disjoint sums, so its feasible set can be
/// projected onto exactly.
pub struct BlockQp {
    pub qp: QuadraticProgram,
    pub blocks: Vec<(Vec<usize>, f64)>,
}

pub fn random_psd(rng: &mut ChaCha8Rng, m: usize, rank: usize, ridge: f64) -> DenseMatrix {
    let mut b = DenseMatrix::zeros(m, rank);
    for i in 0..m {
        for j in 0..rank {
            b[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let mut p = b.matmul(&b.transpose()).unwrap();
    p.scale(1.0 / rank as f64);
    p.add_diagonal(ridge);
    p.symmetrize();
    p
}

pub fn random_block_qp(rng: &mut ChaCha8Rng, m: usize) -> BlockQp {
    let rank = rng.random_range(1..=m);
    let ridge = if rng.random_bool(0.5) { 1e-2 } else { 0.1 };
    let p = random_psd(rng, m, rank, ridge);
    let q: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n_blocks = rng.random_range(0..=3usize.min(m));
    let mut lower = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut member = vec![None; m];
    for j in 0..m {
        if n_blocks > 0 && rng.random_bool(0.8) {
            member[j] = Some(rng.random_range(0..n_blocks));
        }
        match (member[j].is_some(), rng.random_range(0..4)) {
            (true, 0) => upper[j] = 1.0,
            (true, 1) if j % 5 == 0 => upper[j] = 0.0,
            (true, _) => upper[j] = f64::INFINITY,
            (false, 0) => {
                lower[j] = f64::NEG_INFINITY;
                upper[j] = f64::INFINITY;
            }
            (false, 1) => {
                lower[j] = -1.0;
                upper[j] = 1.0;
            }
            (false, _) => upper[j] = f64::INFINITY,
        }
    }
    let mut blocks = Vec::new();
    let mut rows = Vec::new();
    for b in 0..n_blocks {
        let idx: Vec<usize> = (0..m).filter(|&j| member[j] == Some(b)).collect();
        let movable = idx.iter().filter(|&&j| upper[j] > 0.0).count();
        if movable == 0 {
            continue;
        }
        let c = rng.random_range(0.2..0.8) * movable as f64;
        let mut row = vec![0.0; m];
        for &j in &idx {
            row[j] = 1.0;
        }
        rows.push((row, c));
        blocks.push((idx, c));
    }
    let mut qp = QuadraticProgram::unconstrained(p, q).with_bounds(lower, upper);
    if !rows.is_empty() {
        let a = DenseMatrix::from_rows(&rows.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>());
        qp = qp.with_equalities(a, rows.iter().map(|(_, c)| *c).collect());
    }
    BlockQp { qp, blocks }
}

/// Projects `v` onto `{x ∈ [l, u] : Σ_{j∈idx} x_j = c}` restricted to `idx`.
fn project_block(v: &mut [f64], idx: &[usize], c: f64, l: &[f64], u: &[f64]) {
    let total = |tau: f64, v: &[f64]| -> f64 { idx.iter().map(|&j| (v[j] - tau).clamp(l[j], u[j])).sum() };
    let mut lo = -1.0;
    let mut hi = 1.0;
    while total(lo, v) < c {
        lo = 2.0 * lo - 1.0;
    }
    while total(hi, v) > c {
        hi = 2.0 * hi + 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid, v) > c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    // exact shift on the free set found by bisection
    let free: Vec<usize> = idx.iter().copied().filter(|&j| l[j] < v[j] - tau && v[j] - tau < u[j]).collect();
    let tau = if free.is_empty() {
        tau
    } else {
        let pinned: f64 = idx
            .iter()
            .filter(|j| !free.contains(j))
            .map(|&j| (v[j] - tau).clamp(l[j], u[j]))
            .sum();
        (free.iter().map(|&j| v[j]).sum::<f64>() + pinned - c) / free.len() as f64
    };
    for &j in idx {
        v[j] = (v[j] - tau).clamp(l[j], u[j]);
    }
}

fn project(bq: &BlockQp, x: &mut [f64]) {
    let (l, u) = (&bq.qp.lower, &bq.qp.upper);
    let mut in_block = vec![false; x.len()];
    for (idx, c) in &bq.blocks {
        project_block(x, idx, *c, l, u);
        for &j in idx {
            in_block[j] = true;
        }
    }
    for j in 0..x.len() {
        if !in_block[j] {
            x[j] = x[j].clamp(l[j], u[j]);
        }
    }
}

fn largest_eigenvalue(p: &DenseMatrix) -> f64 {
    let m = p.rows();
    let mut v: Vec<f64> = (0..m).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let mut lambda = 1.0;
    for _ in 0..300 {
        let w = p.matvec(&v).unwrap();
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 1.0;
        }
        lambda = norm / v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = w.iter().map(|a| a / norm).collect();
    }
    lambda
}

/// Accelerated projected gradient with adaptive restart.
pub fn projected_gradient(bq: &BlockQp, max_iter: usize) -> Vec<f64> {
    let qp = &bq.qp;
    let m = qp.dim();
    let step = 1.0 / (1.01 * largest_eigenvalue(&qp.p));
    let mut x = vec![0.0; m];
    project(bq, &mut x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut quiet = 0;
    for _ in 0..max_iter {
        let g = qp.p.matvec(&y).unwrap();
        let mut next: Vec<f64> = (0..m).map(|j| y[j] - step * (g[j] + qp.q[j])).collect();
        project(bq, &mut next);
        let moved: f64 = (0..m).map(|j| (next[j] - x[j]).abs()).fold(0.0, f64::max);
        let scale = 1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let uphill: f64 = (0..m).map(|j| (y[j] - next[j]) * (next[j] - x[j])).sum();
        let t_next = if uphill > 0.0 { 1.0 } else { (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0 };
        let beta = if uphill > 0.0 { 0.0 } else { (t - 1.0) / t_next };
        y = (0..m).map(|j| next[j] + beta * (next[j] - x[j])).collect();
        x = next;
        t = t_next;
        if moved <= 1e-14 * scale {
            quiet += 1;
            if quiet >= 20 {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    x
}

/// `(1/n²)[Σ_t (I_t W − V)ᵀK_t(I_t W − V) + Σ λ_t W_i²]` written out term
/// by term.
pub fn fixed_target_cmse(w: &[f64], v: &[f64], k1: &DenseMatrix, k0: &DenseMatrix, treated: &[bool], lambda: (f64, f64)) -> f64 {
    let n = w.len();
    let mut total = 0.0;
    for (arm, k) in [(true, k1), (false, k0)] {
        let d: Vec<f64> = (0..n).map(|i| if treated[i] == arm { w[i] } else { 0.0 } - v[i]).collect();
        for i in 0..n {
            for j in 0..n {
                total += d[i] * k[(i, j)] * d[j];
            }
        }
    }
    for i in 0..n {
        let l = if treated[i] { lambda.0 } else { lambda.1 };
        total += l * w[i] * w[i];
    }
    total / (n * n) as f64
}

/// Best weights for a fixed target by projected gradient on the expanded
/// quadratic.
pub fn fixed_target_optimum(v: &[f64], k1: &DenseMatrix, k0: &DenseMatrix, treated: &[bool], lambda: (f64, f64)) -> (Vec<f64>, f64) {
    let n = v.len();
    let mut p = DenseMatrix::zeros(n, n);
    let mut q = vec![0.0; n];
    for i in 0..n {
        let ki = if treated[i] { k1 } else { k0 };
        for j in 0..n {
            if treated[i] == treated[j] {
                p[(i, j)] = 2.0 * ki[(i, j)];
            }
            q[i] -= 2.0 * ki[(i, j)] * v[j];
        }
        p[(i, i)] += 2.0 * if treated[i] { lambda.0 } else { lambda.1 };
    }
    let arm = |flag: bool| -> Vec<usize> { (0..n).filter(|&i| treated[i] == flag).collect() };
    let nf = n as f64;
    let bq = BlockQp {
        qp: QuadraticProgram::unconstrained(p, q).with_bounds(vec![0.0; n], vec![f64::INFINITY; n]),
        blocks: vec![(arm(true), nf), (arm(false), nf)],
    };
    let w = projected_gradient(&bq, 200_000);
    let cmse = fixed_target_cmse(&w, v, k1, k0, treated, lambda);
    (w, cmse)
}

/// Minimum over every size-`card` subset `A` of the best fixed-target CMSE
/// with `V = (n/card)·1_A`.
pub fn subset_enumeration(k1: &DenseMatrix, k0: &DenseMatrix, treated: &[bool], lambda: (f64, f64), card: usize) -> f64 {
    let n = treated.len();
    let level = n as f64 / card as f64;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != card {
            continue;
        }
        let v: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { level } else { 0.0 }).collect();
        best = best.min(fixed_target_optimum(&v, k1, k0, treated, lambda).1);
    }
    best
}

/// `(1 + xᵢ·xⱼ)²` on the rows of `x`.
pub fn quadratic_gram(x: &DenseMatrix) -> DenseMatrix {
    let n = x.rows();
    let mut k = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let ip: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            k[(i, j)] = (1.0 + ip).powi(2);
        }
    }
    k
}

/// Value of `(1/n) Σ (I_S I_t W − V)_i f(X_i)` for the RKHS function
/// `f = Σ_j a_j K(·, X_j)` scaled to unit norm.
pub fn imbalance_at(a: &[f64], w: &[f64], v: &[f64], k: &DenseMatrix, in_study: &[bool], treated: &[bool], arm: bool) -> f64 {
    let n = w.len();
    let f = k.matvec(a).unwrap();
    let norm_sq: f64 = a.iter().zip(&f).map(|(x, y)| x * y).sum();
    let norm = norm_sq.sqrt();
    (0..n)
        .map(|i| {
            let own = if in_study[i] && treated[i] == arm { w[i] } else { 0.0 };
            (own - v[i]) * f[i] / norm
        })
        .sum::<f64>()
        / n as f64
}

/// Coefficients of the representer `Σ_j d_j K(·, X_j)` that attains the
/// worst case.
pub fn maximizer_coefficients(w: &[f64], v: &[f64], in_study: &[bool], treated: &[bool], arm: bool) -> Vec<f64> {
    (0..w.len())
        .map(|i| if in_study[i] && treated[i] == arm { w[i] } else { 0.0 } - v[i])
        .collect()
}
