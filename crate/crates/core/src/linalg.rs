//! Sparse matrices and the linear solvers behind every implicit step.
//!
//! Krylov solves are held to a relative residual of `1e-10` within `10_000`
//! iterations. One-dimensional scalar problems skip Krylov entirely and use a
//! direct (possibly cyclic) tridiagonal elimination.

use crate::error::{Error, Result};

pub const SOLVE_TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 10_000;

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet ({r},{c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            col_idx.push(c);
            values.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix { n_rows, n_cols, row_ptr, col_idx, values }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of one row as (column, value) pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        for r in 0..self.n_rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|r| self.get(r, r)).collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut trip = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                trip.push((c, r, v));
            }
        }
        CsrMatrix::from_triplets(self.n_cols, self.n_rows, trip)
    }

    /// Largest entrywise difference to another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        let mut worst: f64 = 0.0;
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                worst = worst.max((v - other.get(r, c)).abs());
            }
            for (c, v) in other.row(r) {
                worst = worst.max((v - self.get(r, c)).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.n_rows == self.n_cols && self.max_abs_diff(&self.transpose()) <= tol
    }
}

/// Outcome of an iterative or direct solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Relative residual ‖b − Ax‖/‖b‖ (absolute when b = 0).
pub fn relative_residual(a: &CsrMatrix, b: &[f64], x: &[f64]) -> f64 {
    let mut ax = vec![0.0; b.len()];
    a.mul_vec(x, &mut ax);
    let r: f64 = b.iter().zip(&ax).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt();
    let nb = norm(b);
    if nb > 0.0 {
        r / nb
    } else {
        r
    }
}

fn inverse_diagonal(a: &CsrMatrix) -> Vec<f64> {
    a.diagonal().into_iter().map(|d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect()
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive definite
/// systems. `x` holds the initial guess on entry.
pub fn pcg(a: &CsrMatrix, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<SolveStats> {
    let n = b.len();
    let nb = norm(b);
    if nb == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, relative_residual: 0.0 });
    }
    let dinv = inverse_diagonal(a);
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = norm(&r) / nb;
    let mut it = 0;
    while res > tol && it < max_iter {
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
        res = norm(&r) / nb;
    }
    finish(a, b, x, it, tol)
}

/// Jacobi-preconditioned BiCGSTAB for nonsymmetric systems.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<SolveStats> {
    let n = b.len();
    let nb = norm(b);
    if nb == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, relative_residual: 0.0 });
    }
    let dinv = inverse_diagonal(a);
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut zz = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut it = 0;
    let mut res = norm(&r) / nb;
    while res > tol && it < max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] * dinv[i];
        }
        a.mul_vec(&y, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            break;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        it += 1;
        if norm(&s) / nb <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            break;
        }
        for i in 0..n {
            zz[i] = s[i] * dinv[i];
        }
        a.mul_vec(&zz, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * zz[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm(&r) / nb;
        if omega == 0.0 {
            break;
        }
    }
    finish(a, b, x, it, tol)
}

fn finish(a: &CsrMatrix, b: &[f64], x: &[f64], iterations: usize, tol: f64) -> Result<SolveStats> {
    let relative_residual = relative_residual(a, b, x);
    if !(relative_residual <= tol) {
        return Err(Error::SolverDivergence { iterations, residual: relative_residual });
    }
    Ok(SolveStats { iterations, relative_residual })
}

/// Tridiagonal matrix, optionally with periodic corner couplings.
///
/// Row `i` reads `lower[i]·x[i-1] + diag[i]·x[i] + upper[i]·x[i+1]`, indices
/// wrapping when `cyclic` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    pub cyclic: bool,
}

impl Tridiagonal {
    pub fn new(n: usize, cyclic: bool) -> Self {
        Tridiagonal { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n], cyclic }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.lower[i] * x[i - 1];
            } else if self.cyclic {
                acc += self.lower[i] * x[n - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            } else if self.cyclic {
                acc += self.upper[i] * x[0];
            }
            y[i] = acc;
        }
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let n = self.len();
        let mut trip = Vec::with_capacity(3 * n);
        for i in 0..n {
            trip.push((i, i, self.diag[i]));
            if i > 0 {
                trip.push((i, i - 1, self.lower[i]));
            } else if self.cyclic && n > 1 {
                trip.push((i, n - 1, self.lower[i]));
            }
            if i + 1 < n {
                trip.push((i, i + 1, self.upper[i]));
            } else if self.cyclic && n > 1 {
                trip.push((i, 0, self.upper[i]));
            }
        }
        CsrMatrix::from_triplets(n, n, trip)
    }

    fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
        let n = diag.len();
        let mut c = vec![0.0; n];
        let mut x = vec![0.0; n];
        let mut beta = diag[0];
        x[0] = rhs[0] / beta;
        for i in 1..n {
            c[i] = upper[i - 1] / beta;
            beta = diag[i] - lower[i] * c[i];
            x[i] = (rhs[i] - lower[i] * x[i - 1]) / beta;
        }
        for i in (0..n - 1).rev() {
            let next = x[i + 1];
            x[i] -= c[i + 1] * next;
        }
        x
    }

    /// Direct solve. The cyclic case uses a Sherman–Morrison correction and
    /// needs at least three unknowns.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let x = if !self.cyclic || n < 3 {
            if self.cyclic {
                self.to_csr_dense_solve(rhs)?
            } else {
                Self::thomas(&self.lower, &self.diag, &self.upper, rhs)
            }
        } else {
            let alpha = self.upper[n - 1];
            let beta = self.lower[0];
            let gamma = -self.diag[0];
            let mut diag = self.diag.clone();
            diag[0] -= gamma;
            diag[n - 1] -= alpha * beta / gamma;
            let y = Self::thomas(&self.lower, &diag, &self.upper, rhs);
            let mut u = vec![0.0; n];
            u[0] = gamma;
            u[n - 1] = alpha;
            let z = Self::thomas(&self.lower, &diag, &self.upper, &u);
            let fact = (y[0] + beta * y[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
            y.iter().zip(&z).map(|(yi, zi)| yi - fact * zi).collect()
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverDivergence { iterations: 0, residual: f64::NAN });
        }
        Ok(x)
    }

    fn to_csr_dense_solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let csr = self.to_csr();
        let mut m = vec![vec![0.0; n]; n];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in csr.row(r) {
                row[c] += v;
            }
        }
        dense_solve(m, rhs.to_vec())
    }
}

/// Gaussian elimination with partial pivoting on a small dense system.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::SolverDivergence { iterations: 0, residual: f64::INFINITY });
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Ordinary least squares via the normal equations. `rows` are design rows,
/// `weights` optional nonnegative weights.
pub fn least_squares(rows: &[Vec<f64>], rhs: &[f64], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    let mut ata = vec![vec![0.0; p]; p];
    let mut atb = vec![0.0; p];
    for (k, row) in rows.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        for i in 0..p {
            atb[i] += w * row[i] * rhs[k];
            for j in 0..p {
                ata[i][j] += w * row[i] * row[j];
            }
        }
    }
    dense_solve(ata, atb)
}

/// Slope and intercept of the least-squares line through (x, y).
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Eigenvalues of a small symmetric matrix (row-major, `n`×`n`) by cyclic
/// Jacobi rotations, sorted ascending.
pub fn symmetric_eigenvalues(mat: &[f64], n: usize) -> Vec<f64> {
    let mut a = mat.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}
