//! Dense row-major linear algebra: Cholesky with a jitter ladder, triangular
//! solves, sample moments with ridge, and quadratic forms.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Smallest accepted Cholesky pivot, relative to the mean diagonal.
const PIVOT_FLOOR: f64 = 1e-14;
/// Relative asymmetry tolerated by [`cholesky`].
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix from {} entries",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "transpose of {}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut m = self.clone();
        m.scale(c);
        m
    }

    pub fn add_diagonal(&mut self, c: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += c;
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("matrix sum".into()));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest `|a_ij - a_ji|`; infinite for non-square input.
    pub fn max_asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces the matrix by `(A + Aᵀ)/2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        for i in 0..self.rows {
            for j in 0..i {
                let m = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = m;
                self[(j, i)] = m;
            }
        }
    }

    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut out = Self::zeros(rows.len(), cols.len());
        for (a, &i) in rows.iter().enumerate() {
            let src = self.row(i);
            for (b, &j) in cols.iter().enumerate() {
                out[(a, b)] = src[j];
            }
        }
        out
    }

    pub fn principal_submatrix(&self, idx: &[usize]) -> Self {
        self.submatrix(idx, idx)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize without reassociation.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter_used·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: DenseMatrix,
    pub jitter_used: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let row = self.l.row(i);
            let s = b[i] - dot(&row[..i], &b[..i]);
            b[i] = s / row[i];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for i in (0..n).rev() {
            let row = self.l.row(i);
            b[i] /= row[i];
            let xi = b[i];
            for (bj, &lij) in b[..i].iter_mut().zip(&row[..i]) {
                *bj -= lij * xi;
            }
        }
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.solve_lower_in_place(b);
        self.solve_upper_in_place(b);
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "factor of order {} with right-hand side of length {}",
                self.dim(),
                b.len()
            )));
        }
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        Ok(x)
    }

    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch("triangular solve".into()));
        }
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        Ok(x)
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L Lᵀ`, i.e. the input plus the jitter.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.dim();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(&self.l.row(i)[..=j], &self.l.row(j)[..=j]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

/// Cholesky factorization with a geometric jitter ladder.
///
/// The plain factorization is tried first. On failure the diagonal is
/// inflated by `1e-10·mean(diag A)` and the jitter grows tenfold per retry
/// until it would exceed `max_jitter`.
pub fn cholesky(a: &DenseMatrix, max_jitter: f64) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.max_abs().max(1.0);
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::AsymmetricInput(asym));
    }
    let n = a.rows();
    let mean_diag = if n == 0 { 0.0 } else { a.trace() / n as f64 };
    let diag_scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let floor = PIVOT_FLOOR * diag_scale;

    let mut jitter = 0.0;
    let base = 1e-10 * diag_scale;
    loop {
        if let Some(l) = factor_once(a, jitter, floor) {
            return Ok(CholeskyFactor {
                l,
                jitter_used: jitter,
            });
        }
        jitter = if jitter == 0.0 { base } else { jitter * 10.0 };
        if jitter > max_jitter {
            return Err(Error::NotPositiveDefinite { max_jitter });
        }
    }
}

fn factor_once(a: &DenseMatrix, jitter: f64, floor: f64) -> Option<DenseMatrix> {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = {
                let (li, lj) = if i == j {
                    (l.row(i), l.row(i))
                } else {
                    (l.row(i), l.row(j))
                };
                dot(&li[..j], &lj[..j])
            };
            if i == j {
                let d = a[(i, i)] + jitter - s;
                if !(d > floor) || !d.is_finite() {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Column means, ridged sample covariance, and its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCov {
    pub mean: Vec<f64>,
    /// Unbiased covariance with `ridge·I` already added.
    pub cov: DenseMatrix,
    pub factor: CholeskyFactor,
    pub ridge: f64,
}

pub fn sample_mean_cov(x: &DenseMatrix) -> Result<MeanCov> {
    let (n, p) = (x.rows(), x.cols());
    if n < 2 || p == 0 {
        return Err(Error::DimensionMismatch(format!(
            "sample covariance needs at least two rows and one column, got {n}x{p}"
        )));
    }
    let mut mean = vec![0.0; p];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DenseMatrix::zeros(p, p);
    let mut centered = vec![0.0; p];
    for i in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(x.row(i)).zip(&mean) {
            *c = v - m;
        }
        for a in 0..p {
            for b in 0..=a {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..=a {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let trace = cov.trace();
    let ridges = [1e-8 * trace / p as f64, 1e-6 * trace.max(1.0)];
    for ridge in ridges {
        if !(ridge > 0.0) {
            continue;
        }
        let mut ridged = cov.clone();
        ridged.add_diagonal(ridge);
        if let Ok(factor) = cholesky(&ridged, 0.0) {
            return Ok(MeanCov {
                mean,
                cov: ridged,
                factor,
                ridge,
            });
        }
    }
    Err(Error::DegenerateCovariance)
}

/// `vᵀ A v`.
pub fn quad_form(v: &[f64], a: &DenseMatrix) -> Result<f64> {
    if !a.is_square() || a.rows() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "quadratic form of a vector of length {} with a {}x{} matrix",
            v.len(),
            a.rows(),
            a.cols()
        )));
    }
    Ok((0..v.len())
        .filter(|&i| v[i] != 0.0)
        .map(|i| v[i] * dot(a.row(i), v))
        .sum())
}
