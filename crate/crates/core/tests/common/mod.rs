#![allow(dead_code)]
//! Independent reference solutions shared by the integration tests.

use aphom_core::apfield::CoefficientTensorField;

/// Gaussian elimination with partial pivoting, kept separate from the library solver.
pub fn gauss(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            if f == 0.0 {
                continue;
            }
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Frequency-Galerkin corrector of a one-dimensional scalar stationary field.
///
/// Solves `−(a(1 + χ'))' + S⁻²χ = 0` on the frequency lattice spanned by the
/// field's wavenumbers with every lattice coordinate at most `n_max`.
pub struct Galerkin {
    pub freqs: Vec<f64>,
    /// Complex coefficients `(re, im)` of `χ`.
    pub chi: Vec<(f64, f64)>,
    pub a_hat: f64,
}

impl Galerkin {
    pub fn solve(field: &CoefficientTensorField, s: f64, n_max: i64) -> Galerkin {
        assert_eq!((field.d, field.m), (1, 1));
        let mut base: Vec<f64> = Vec::new();
        for at in &field.atoms {
            assert_eq!(at.lambda, 0.0);
            let k = at.k[0].abs();
            if !base.iter().any(|b| (k / b - (k / b).round()).abs() < 1e-9) {
                base.push(k);
            }
        }
        // lattice points
        let mut pts: Vec<Vec<i64>> = vec![vec![]];
        for _ in &base {
            pts = pts
                .into_iter()
                .flat_map(|p| (-n_max..=n_max).map(move |n| {
                    let mut q = p.clone();
                    q.push(n);
                    q
                }))
                .collect();
        }
        let freqs: Vec<f64> = pts.iter().map(|p| p.iter().zip(&base).map(|(n, k)| *n as f64 * k).sum()).collect();
        let coef = |w: f64| -> (f64, f64) {
            let mut c = (0.0, 0.0);
            if w.abs() < 1e-9 {
                c.0 += field.constant_term.data[0];
            }
            for at in &field.atoms {
                let amp = 0.5 * at.amplitude.data[0];
                let ph = at.phase[0];
                if (at.k[0] - w).abs() < 1e-9 {
                    c.0 += amp * ph.cos();
                    c.1 += amp * ph.sin();
                }
                if (at.k[0] + w).abs() < 1e-9 {
                    c.0 += amp * ph.cos();
                    c.1 -= amp * ph.sin();
                }
            }
            c
        };
        let n = freqs.len();
        let mut mat = vec![vec![0.0; 2 * n]; 2 * n];
        let mut rhs = vec![0.0; 2 * n];
        for (r, &w) in freqs.iter().enumerate() {
            for (c, &v) in freqs.iter().enumerate() {
                let (ar, ai) = coef(w - v);
                let f = w * v;
                let mut dr = f * ar;
                let di = f * ai;
                if r == c {
                    dr += 1.0 / (s * s);
                }
                mat[r][c] = dr;
                mat[r][n + c] = -di;
                mat[n + r][c] = di;
                mat[n + r][n + c] = dr;
            }
            // i·w·a_w
            let (ar, ai) = coef(w);
            rhs[r] = -w * ai;
            rhs[n + r] = w * ar;
        }
        let x = gauss(mat, rhs);
        let chi: Vec<(f64, f64)> = (0..n).map(|k| (x[k], x[n + k])).collect();
        // Â = a_0 + Σ a_{-w} (i w) χ_w
        let mut a_hat = coef(0.0).0;
        for (k, &w) in freqs.iter().enumerate() {
            let (ar, ai) = coef(-w);
            let (cr, ci) = chi[k];
            // (ar + i ai)(i w)(cr + i ci), real part
            a_hat += -w * (ar * ci + ai * cr);
        }
        Galerkin { freqs, chi, a_hat }
    }

    pub fn value(&self, y: f64) -> f64 {
        self.freqs.iter().zip(&self.chi).map(|(w, (cr, ci))| cr * (w * y).cos() - ci * (w * y).sin()).sum()
    }
}
