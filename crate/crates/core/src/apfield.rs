//! Almost-periodic coefficient fields and their almost-periodicity metrics.
//!
//! A field is a finite trigonometric sum
//! `A(y,s) = A0 + Σ c·cos(k·y + λs + phase)` of `[i][j][α][β]` tensors.
//! `rho_hat` and `theta_hat` are surrogates built from the atom list alone:
//! the inner infimum over `Z` is replaced by an upper bound per shift pair,
//! and the outer supremum over `Y` is sampled.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{fit_line, symmetric_eigenvalues};
use crate::mesh::{window_mean, NodeField, Window};

/// Dense coefficient tensor `a_{ij}^{αβ}` stored flat in `[i][j][α][β]` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefTensor {
    pub d: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl CoefTensor {
    pub fn zeros(d: usize, m: usize) -> Self {
        CoefTensor { d, m, data: vec![0.0; d * d * m * m] }
    }

    /// `δ_ij δ^{αβ}`.
    pub fn identity(d: usize, m: usize) -> Self {
        let mut t = Self::zeros(d, m);
        for i in 0..d {
            for a in 0..m {
                t.set(i, i, a, a, 1.0);
            }
        }
        t
    }

    pub fn scalar(d: usize, m: usize, value: f64) -> Self {
        let mut t = Self::identity(d, m);
        t.data.iter_mut().for_each(|v| *v *= value);
        t
    }

    #[inline]
    pub fn index(d: usize, m: usize, i: usize, j: usize, a: usize, b: usize) -> usize {
        ((i * d + j) * m + a) * m + b
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        self.data[Self::index(self.d, self.m, i, j, a, b)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, a: usize, b: usize, v: f64) {
        let k = Self::index(self.d, self.m, i, j, a, b);
        self.data[k] = v;
    }

    pub fn from_nested(nested: &[Vec<Vec<Vec<f64>>>]) -> Result<Self> {
        let d = nested.len();
        let m = nested.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if d == 0 || m == 0 {
            return Err(invalid("tensor must be nonempty"));
        }
        let mut t = Self::zeros(d, m);
        for (i, row) in nested.iter().enumerate() {
            if row.len() != d {
                return Err(invalid("tensor index j has the wrong extent"));
            }
            for (j, block) in row.iter().enumerate() {
                if block.len() != m {
                    return Err(invalid("tensor index alpha has the wrong extent"));
                }
                for (a, line) in block.iter().enumerate() {
                    if line.len() != m {
                        return Err(invalid("tensor index beta has the wrong extent"));
                    }
                    for (b, &v) in line.iter().enumerate() {
                        t.set(i, j, a, b, v);
                    }
                }
            }
        }
        Ok(t)
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        (0..self.d)
            .map(|i| {
                (0..self.d)
                    .map(|j| (0..self.m).map(|a| (0..self.m).map(|b| self.get(i, j, a, b)).collect()).collect())
                    .collect()
            })
            .collect()
    }

    /// The adjoint tensor `a*_{ij}^{αβ} = a_{ji}^{βα}`.
    pub fn adjoint(&self) -> Self {
        let mut t = Self::zeros(self.d, self.m);
        for i in 0..self.d {
            for j in 0..self.d {
                for a in 0..self.m {
                    for b in 0..self.m {
                        t.set(i, j, a, b, self.get(j, i, b, a));
                    }
                }
            }
        }
        t
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &CoefTensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `a_{ij}^{αβ} ξ_i^α ξ_j^β` with `ξ` laid out as `[i][α]`.
    pub fn quadratic_form(&self, xi: &[f64]) -> f64 {
        let (d, m) = (self.d, self.m);
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                for a in 0..m {
                    for b in 0..m {
                        acc += self.get(i, j, a, b) * xi[i * m + a] * xi[j * m + b];
                    }
                }
            }
        }
        acc
    }

    /// Smallest and largest value of the quadratic form on unit vectors.
    pub fn form_extremes(&self) -> (f64, f64) {
        extremes_of(&self.data, self.d, self.m)
    }
}

fn extremes_of(data: &[f64], d: usize, m: usize) -> (f64, f64) {
    let n = d * m;
    let mut sym = vec![0.0; n * n];
    for i in 0..d {
        for j in 0..d {
            for a in 0..m {
                for b in 0..m {
                    let v = data[CoefTensor::index(d, m, i, j, a, b)];
                    let (r, c) = (i * m + a, j * m + b);
                    sym[r * n + c] += 0.5 * v;
                    sym[c * n + r] += 0.5 * v;
                }
            }
        }
    }
    let ev = symmetric_eigenvalues(&sym, n);
    (ev[0], ev[n - 1])
}

/// Anything that yields a coefficient tensor at a space-time point.
pub trait CoefficientSource: Sync {
    fn dim(&self) -> usize;
    fn components(&self) -> usize;
    /// Writes the tensor at `(x, t)` into `out` (length `d²m²`).
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn is_time_independent(&self) -> bool;

    /// Spatial gradient laid out as `[k][i][j][α][β]`. Defaults to centered
    /// differences.
    fn grad_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let n = self.dim() * self.dim() * self.components() * self.components();
        let step = 1e-6;
        let mut xp = x.to_vec();
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        for k in 0..self.dim() {
            xp[k] = x[k] + step;
            self.eval_into(&xp, t, &mut plus);
            xp[k] = x[k] - step;
            self.eval_into(&xp, t, &mut minus);
            xp[k] = x[k];
            for e in 0..n {
                out[k * n + e] = (plus[e] - minus[e]) / (2.0 * step);
            }
        }
    }

    fn eval(&self, x: &[f64], t: f64) -> CoefTensor {
        let mut c = CoefTensor::zeros(self.dim(), self.components());
        self.eval_into(x, t, &mut c.data);
        c
    }
}

/// Space-time constant coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantCoefficients(pub CoefTensor);

impl CoefficientSource for ConstantCoefficients {
    fn dim(&self) -> usize {
        self.0.d
    }
    fn components(&self) -> usize {
        self.0.m
    }
    fn eval_into(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.0.data);
    }
    fn is_time_independent(&self) -> bool {
        true
    }
    fn grad_into(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// The rapidly oscillating coefficient `A(x/ε, t/ε²)`.
pub struct Scaled<'a> {
    pub inner: &'a dyn CoefficientSource,
    pub eps: f64,
}

impl<'a> Scaled<'a> {
    pub fn new(inner: &'a dyn CoefficientSource, eps: f64) -> Self {
        Scaled { inner, eps }
    }
}

impl CoefficientSource for Scaled<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn components(&self) -> usize {
        self.inner.components()
    }
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let y: Vec<f64> = x.iter().map(|v| v / self.eps).collect();
        self.inner.eval_into(&y, t / (self.eps * self.eps), out);
    }
    fn is_time_independent(&self) -> bool {
        self.inner.is_time_independent()
    }
    fn grad_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let y: Vec<f64> = x.iter().map(|v| v / self.eps).collect();
        self.inner.grad_into(&y, t / (self.eps * self.eps), out);
        out.iter_mut().for_each(|v| *v /= self.eps);
    }
}

/// One summand `c·cos(k·y + λs + phase)`, with a phase per tensor entry.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyAtom {
    pub k: Vec<f64>,
    pub lambda: f64,
    pub amplitude: CoefTensor,
    pub phase: Vec<f64>,
}

impl FrequencyAtom {
    /// Atom with a common phase for every entry.
    pub fn new(k: Vec<f64>, lambda: f64, amplitude: CoefTensor, phase: f64) -> Self {
        let n = amplitude.data.len();
        FrequencyAtom { k, lambda, amplitude, phase: vec![phase; n] }
    }

    fn arg(&self, y: &[f64], s: f64) -> f64 {
        self.k.iter().zip(y).map(|(k, y)| k * y).sum::<f64>() + self.lambda * s
    }

    fn is_static(&self) -> bool {
        self.k.iter().all(|&k| k == 0.0) && self.lambda == 0.0
    }
}

/// Real almost-periodic coefficient field given by finitely many atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientTensorField {
    pub d: usize,
    pub m: usize,
    pub mu: f64,
    pub constant_term: CoefTensor,
    pub atoms: Vec<FrequencyAtom>,
}

impl CoefficientTensorField {
    pub fn new(mu: f64, constant_term: CoefTensor, atoms: Vec<FrequencyAtom>) -> Result<Self> {
        let (d, m) = (constant_term.d, constant_term.m);
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(invalid(format!("mu={mu} must lie in (0, 1]")));
        }
        if constant_term.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("constant term has non-finite entries"));
        }
        for (n, a) in atoms.iter().enumerate() {
            if a.k.len() != d || a.amplitude.d != d || a.amplitude.m != m || a.phase.len() != d * d * m * m {
                return Err(invalid(format!("atom {n} does not match d={d}, m={m}")));
            }
            if a.amplitude.data.iter().chain(&a.phase).chain(&a.k).any(|v| !v.is_finite()) || !a.lambda.is_finite() {
                return Err(invalid(format!("atom {n} has non-finite entries")));
            }
        }
        Ok(CoefficientTensorField { d, m, mu, constant_term, atoms })
    }

    pub fn constant(mu: f64, a0: CoefTensor) -> Result<Self> {
        Self::new(mu, a0, Vec::new())
    }

    /// `A0 + Σ atoms` at `(y, s)`.
    pub fn evaluate(&self, y: &[f64], s: f64) -> CoefTensor {
        let mut t = CoefTensor::zeros(self.d, self.m);
        self.eval_into(y, s, &mut t.data);
        t
    }

    /// The adjoint field `A*`.
    pub fn adjoint(&self) -> Self {
        let transpose_phase = |p: &[f64]| {
            let t = CoefTensor { d: self.d, m: self.m, data: p.to_vec() };
            t.adjoint().data
        };
        CoefficientTensorField {
            d: self.d,
            m: self.m,
            mu: self.mu,
            constant_term: self.constant_term.adjoint(),
            atoms: self
                .atoms
                .iter()
                .map(|a| FrequencyAtom {
                    k: a.k.clone(),
                    lambda: a.lambda,
                    amplitude: a.amplitude.adjoint(),
                    phase: transpose_phase(&a.phase),
                })
                .collect(),
        }
    }

    /// Atoms that actually oscillate (nonzero frequency and amplitude).
    fn live_atoms(&self) -> impl Iterator<Item = &FrequencyAtom> {
        self.atoms.iter().filter(|a| !a.is_static() && a.amplitude.frobenius() > 0.0)
    }

    /// Largest spatial wavenumber component `max |k_c|` over live atoms.
    pub fn max_spatial_wavenumber(&self) -> f64 {
        self.live_atoms().flat_map(|a| a.k.iter().map(|k| k.abs())).fold(0.0, f64::max)
    }

    /// Shortest spatial period `2π / max|k_c|`, or `None` without spatial atoms.
    pub fn shortest_spatial_period(&self) -> Option<f64> {
        let k = self.max_spatial_wavenumber();
        (k > 0.0).then(|| 2.0 * PI / k)
    }

    /// Longest spatial atom period `2π/|k|`.
    pub fn longest_spatial_period(&self) -> Option<f64> {
        self.live_atoms()
            .map(|a| a.k.iter().map(|k| k * k).sum::<f64>().sqrt())
            .filter(|&k| k > 0.0)
            .map(|k| 2.0 * PI / k)
            .reduce(f64::max)
    }

    pub fn shortest_temporal_period(&self) -> Option<f64> {
        let l = self.live_atoms().map(|a| a.lambda.abs()).fold(0.0, f64::max);
        (l > 0.0).then(|| 2.0 * PI / l)
    }

    pub fn longest_temporal_period(&self) -> Option<f64> {
        self.live_atoms().map(|a| a.lambda.abs()).filter(|&l| l > 0.0).map(|l| 2.0 * PI / l).reduce(f64::max)
    }

    pub fn has_spatial_atoms(&self) -> bool {
        self.live_atoms().any(|a| a.k.iter().any(|&k| k != 0.0))
    }

    pub fn is_symmetric(&self) -> bool {
        let adj = self.adjoint();
        adj.constant_term == self.constant_term && adj.atoms == self.atoms
    }

    pub fn total_amplitude(&self) -> f64 {
        self.live_atoms().map(|a| a.amplitude.frobenius()).sum()
    }
}

impl CoefficientSource for CoefficientTensorField {
    fn dim(&self) -> usize {
        self.d
    }
    fn components(&self) -> usize {
        self.m
    }
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.constant_term.data);
        for a in &self.atoms {
            let arg = a.arg(x, t);
            for ((o, c), p) in out.iter_mut().zip(&a.amplitude.data).zip(&a.phase) {
                if *c != 0.0 {
                    *o += c * (arg + p).cos();
                }
            }
        }
    }
    fn is_time_independent(&self) -> bool {
        self.live_atoms().all(|a| a.lambda == 0.0)
    }
    fn grad_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let n = self.constant_term.data.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        for a in &self.atoms {
            let arg = a.arg(x, t);
            for e in 0..n {
                let c = a.amplitude.data[e];
                if c == 0.0 {
                    continue;
                }
                let s = -c * (arg + a.phase[e]).sin();
                for k in 0..self.d {
                    out[k * n + e] += s * a.k[k];
                }
            }
        }
    }
}

/// Result of sampling the quadratic form of a field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EllipticityReport {
    pub min_quotient: f64,
    pub max_quotient: f64,
    pub n_samples: usize,
    pub mu: f64,
    pub passed: bool,
    pub argmin: (Vec<f64>, f64),
    pub argmax: (Vec<f64>, f64),
}

fn sample_box_side(field: &CoefficientTensorField) -> (f64, f64) {
    let space = 64.0 * field.longest_spatial_period().unwrap_or(1.0);
    let time = 64.0 * field.longest_temporal_period().unwrap_or(1.0);
    (space, time)
}

/// Samples the Rayleigh quotient of `A(y,s)` at pseudo-random points. At
/// each point the extreme quotients over all `ξ` are taken exactly from the
/// symmetric part, so the only sampling error is in `(y, s)`.
pub fn ellipticity_extremes(field: &CoefficientTensorField, n_samples: usize, seed: u64) -> Result<EllipticityReport> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (side_y, side_s) = sample_box_side(field);
    let mut buf = vec![0.0; field.constant_term.data.len()];
    let mut report = EllipticityReport {
        min_quotient: f64::INFINITY,
        max_quotient: f64::NEG_INFINITY,
        n_samples,
        mu: field.mu,
        passed: true,
        argmin: (Vec::new(), 0.0),
        argmax: (Vec::new(), 0.0),
    };
    for _ in 0..n_samples {
        let y: Vec<f64> = (0..field.d).map(|_| rng.gen::<f64>() * side_y).collect();
        let s = rng.gen::<f64>() * side_s;
        field.eval_into(&y, s, &mut buf);
        let (lo, hi) = extremes_of(&buf, field.d, field.m);
        if lo < report.min_quotient {
            report.min_quotient = lo;
            report.argmin = (y.clone(), s);
        }
        if hi > report.max_quotient {
            report.max_quotient = hi;
            report.argmax = (y, s);
        }
    }
    report.passed = report.min_quotient >= field.mu && report.max_quotient <= 1.0 / field.mu;
    Ok(report)
}

/// As [`ellipticity_extremes`], failing with the witness point on violation.
pub fn verify_ellipticity(field: &CoefficientTensorField, n_samples: usize, seed: u64) -> Result<EllipticityReport> {
    let rep = ellipticity_extremes(field, n_samples, seed)?;
    if rep.min_quotient < field.mu {
        return Err(Error::EllipticityViolation {
            y: rep.argmin.0.clone(),
            s: rep.argmin.1,
            quotient: rep.min_quotient,
            lower: field.mu,
            upper: 1.0 / field.mu,
        });
    }
    if rep.max_quotient > 1.0 / field.mu {
        return Err(Error::EllipticityViolation {
            y: rep.argmax.0.clone(),
            s: rep.argmax.1,
            quotient: rep.max_quotient,
            lower: field.mu,
            upper: 1.0 / field.mu,
        });
    }
    Ok(rep)
}

/// Knobs of the `ρ̂` surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    /// Number of shift samples `Y`.
    pub n_shifts: usize,
    /// Lattice points per shortest period along each active coordinate.
    pub resolution: usize,
    /// Upper bound on the number of lattice candidates `Z` per shift.
    pub z_budget: usize,
    /// Shift samples come from a box of side `shift_box_factor · max(R, longest period)`.
    pub shift_box_factor: f64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy { n_shifts: 256, resolution: 16, z_budget: 2048, shift_box_factor: 64.0 }
    }
}

/// Frequencies of the live atoms in turns per unit length along each active
/// space-time coordinate, with the Frobenius weight of each atom.
struct TurnTable {
    active: Vec<usize>,
    spacing: Vec<f64>,
    longest: f64,
    freqs: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TurnTable {
    fn new(field: &CoefficientTensorField, resolution: usize) -> Self {
        let live: Vec<&FrequencyAtom> = field.live_atoms().collect();
        let coord_freq = |a: &FrequencyAtom, c: usize| if c < field.d { a.k[c] } else { a.lambda };
        let active: Vec<usize> = (0..=field.d).filter(|&c| live.iter().any(|a| coord_freq(a, c) != 0.0)).collect();
        let mut spacing = Vec::new();
        let mut longest: f64 = 0.0;
        for &c in &active {
            let fmax = live.iter().map(|a| coord_freq(a, c).abs()).fold(0.0, f64::max);
            let fmin = live.iter().map(|a| coord_freq(a, c).abs()).filter(|&f| f > 0.0).fold(f64::INFINITY, f64::min);
            spacing.push(2.0 * PI / fmax / resolution as f64);
            longest = longest.max(2.0 * PI / fmin);
        }
        let freqs = live.iter().map(|a| active.iter().map(|&c| coord_freq(a, c) / (2.0 * PI)).collect()).collect();
        let weights = live.iter().map(|a| a.amplitude.frobenius()).collect();
        TurnTable { active, spacing, longest, freqs, weights }
    }

    fn turns(&self, p: &[f64]) -> Vec<f64> {
        self.freqs.iter().map(|f| f.iter().zip(p).map(|(a, b)| a * b).sum()).collect()
    }

    /// `Σ ‖c‖·|e^{iθ(Y)} − e^{iθ(Z)}|` from precomputed turn counts.
    fn bound(&self, ty: &[f64], tz: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((w, a), b) in self.weights.iter().zip(ty).zip(tz) {
            let d = a - b;
            let frac = d - d.round();
            acc += w * 2.0 * (PI * frac).sin().abs();
        }
        acc
    }
}

/// Additive recurrence with generalized golden ratios, one stream per axis.
fn kronecker_point(n: usize, dims: usize) -> Vec<f64> {
    let mut phi: f64 = 2.0;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dims as f64 + 1.0));
    }
    (0..dims)
        .map(|c| {
            let alpha = (1.0 / phi).powi(c as i32 + 1);
            (0.5 + alpha * (n as f64 + 1.0)).fract()
        })
        .collect()
}

fn lattice_points(spacing: &[f64], radius: f64) -> Vec<Vec<f64>> {
    let counts: Vec<i64> = spacing.iter().map(|s| (radius / s + 1e-9).floor() as i64).collect();
    let mut out = Vec::new();
    let mut idx: Vec<i64> = counts.iter().map(|c| -c).collect();
    if idx.is_empty() {
        return vec![Vec::new()];
    }
    loop {
        let p: Vec<f64> = idx.iter().zip(spacing).map(|(i, s)| *i as f64 * s).collect();
        if p.iter().map(|v| v * v).sum::<f64>().sqrt() <= radius * (1.0 + 1e-12) {
            out.push(p);
        }
        let mut ax = 0;
        loop {
            if ax == idx.len() {
                return out;
            }
            idx[ax] += 1;
            if idx[ax] > counts[ax] {
                idx[ax] = -counts[ax];
                ax += 1;
            } else {
                break;
            }
        }
    }
}

fn box_count(spacing: &[f64], radius: f64) -> f64 {
    spacing.iter().map(|s| 2.0 * (radius / s).floor() + 1.0).product()
}

/// Candidate set for `Z`: the fine lattice out to the largest radius the
/// budget allows, plus a coarsened lattice out to `R` when the fine one stops
/// short. Sorted by `|Z|` so exact matches near the origin end the scan early.
fn z_candidates(spacing: &[f64], radius: f64, budget: usize) -> Vec<(Vec<f64>, f64)> {
    let budget = budget.max(16) as f64;
    let mut out: Vec<(Vec<f64>, f64)> = Vec::new();
    if box_count(spacing, radius) <= budget {
        out.extend(lattice_points(spacing, radius).into_iter().map(|p| (p, spacing[0])));
    } else {
        let mut lo = 0.0;
        let mut hi = radius;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if box_count(spacing, mid) <= budget / 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.extend(lattice_points(spacing, lo).into_iter().map(|p| (p, spacing[0])));
        let mut factor = 2.0;
        while box_count(&spacing.iter().map(|s| s * factor).collect::<Vec<_>>(), radius) > budget / 2.0 {
            factor *= 2.0;
        }
        let coarse: Vec<f64> = spacing.iter().map(|s| s * factor).collect();
        out.extend(lattice_points(&coarse, radius).into_iter().map(|p| (p, coarse[0])));
    }
    out.sort_by(|a, b| {
        let na: f64 = a.0.iter().map(|v| v * v).sum();
        let nb: f64 = b.0.iter().map(|v| v * v).sum();
        na.total_cmp(&nb)
    });
    out
}

/// Sampled shifts `Y` (active coordinates only), snapped to the lattice.
fn shift_samples(table: &TurnTable, radius: f64, policy: &SamplingPolicy) -> Vec<Vec<f64>> {
    let side = policy.shift_box_factor * radius.max(table.longest);
    (0..policy.n_shifts)
        .map(|n| {
            kronecker_point(n, table.active.len())
                .iter()
                .zip(&table.spacing)
                .map(|(u, s)| ((u - 0.5) * side / s).round() * s)
                .collect()
        })
        .collect()
}

/// Polishes a lattice minimizer by a shrinking pattern search inside `|Z| ≤ R`.
fn refine(table: &TurnTable, ty: &[f64], start: &[f64], start_step: f64, radius: f64, best: f64) -> f64 {
    let mut z = start.to_vec();
    let mut best = best;
    let floor = table.spacing.iter().cloned().fold(f64::INFINITY, f64::min) / 512.0;
    let mut step = start_step / 2.0;
    while step > floor && best > 0.0 {
        let mut moved = false;
        for c in 0..z.len() {
            for sign in [-1.0, 1.0] {
                let mut trial = z.clone();
                trial[c] += sign * step;
                if trial.iter().map(|v| v * v).sum::<f64>().sqrt() > radius {
                    continue;
                }
                let val = table.bound(ty, &table.turns(&trial));
                if val < best {
                    best = val;
                    z = trial;
                    moved = true;
                }
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    best
}

/// Surrogate `ρ̂(R)`: max over sampled shifts `Y` of the min over lattice
/// shifts `|Z| ≤ R` of the atom-coefficient bound. The inner value is an
/// upper bound of the true shifted sup-norm per pair; the outer max is a
/// sample, so ρ̂ is a surrogate rather than a sign-controlled estimate.
pub fn rho_hat(field: &CoefficientTensorField, radius: f64, policy: &SamplingPolicy) -> f64 {
    let table = TurnTable::new(field, policy.resolution);
    if table.weights.is_empty() {
        return 0.0;
    }
    let shifts = shift_samples(&table, radius, policy);
    if radius <= 0.0 {
        let zero = vec![0.0; table.active.len()];
        let tz = table.turns(&zero);
        return shifts.iter().map(|y| table.bound(&table.turns(y), &tz)).fold(0.0, f64::max);
    }
    let cands = z_candidates(&table.spacing, radius, policy.z_budget);
    let cand_turns: Vec<Vec<f64>> = cands.iter().map(|(z, _)| table.turns(z)).collect();
    let mut worst: f64 = 0.0;
    for y in &shifts {
        let ty = table.turns(y);
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (n, tz) in cand_turns.iter().enumerate() {
            let v = table.bound(&ty, tz);
            if v < best {
                best = v;
                arg = n;
                if best == 0.0 {
                    break;
                }
            }
        }
        if best > worst {
            best = refine(&table, &ty, &cands[arg].0, cands[arg].1, radius, best);
        }
        worst = worst.max(best);
    }
    worst
}

/// Value and minimizer of `Θ̂σ(S)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThetaValue {
    pub value: f64,
    pub r_min: f64,
}

/// `Θ̂σ(S) = min_R ρ̂(R) + (R/S)^σ` over 32 geometric points in `[S·1e-4, S]`,
/// together with the `R → 0` limit `ρ̂(0+)`.
pub fn theta_hat(field: &CoefficientTensorField, s: f64, sigma: f64, policy: &SamplingPolicy) -> Result<ThetaValue> {
    if !(s >= 1.0) {
        return Err(invalid(format!("theta_hat needs S >= 1, got {s}")));
    }
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(invalid(format!("sigma={sigma} must lie in (0, 1]")));
    }
    let r0 = rho_hat(field, 0.0, policy);
    let mut best = ThetaValue { value: r0, r_min: 0.0 };
    if r0 == 0.0 {
        return Ok(best);
    }
    let mut envelope = f64::INFINITY;
    for r in theta_grid(s) {
        envelope = envelope.min(rho_hat(field, r, policy));
        let v = envelope + (r / s).powf(sigma);
        if v < best.value {
            best = ThetaValue { value: v, r_min: r };
        }
    }
    Ok(best)
}

/// The geometric `R` grid used by [`theta_hat`].
pub fn theta_grid(s: f64) -> Vec<f64> {
    (0..32).map(|k| s * 10f64.powf(-4.0 + 4.0 * k as f64 / 31.0)).collect()
}

/// Fitted `ρ̂(R) ≤ C [log R]^{−N}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecayFit {
    pub n: f64,
    pub c: f64,
}

/// Least-squares fit of `log ρ̂ = log C − N log log R` over samples with
/// `R ≥ 2` and `ρ̂ > 0`. Fields whose surrogate vanishes identically get
/// `N = ∞`.
pub fn fit_decay(samples: &[(f64, f64)]) -> DecayFit {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(r, v)| *r >= 2.0 && *v > 0.0)
        .map(|(r, v)| (r.ln().ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return DecayFit { n: f64::INFINITY, c: pts.first().map_or(0.0, |p| p.1.exp()) };
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let (slope, icpt) = fit_line(&x, &y);
    DecayFit { n: -slope, c: icpt.exp() }
}

/// Sampled almost-periodicity metrics of a field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlmostPeriodicityReport {
    pub rho_samples: Vec<(f64, f64)>,
    pub theta_samples: Vec<(f64, f64, f64)>,
    pub decay_fit: DecayFit,
    /// Largest observed `Θ̂σ(S) / Θ̂1(S)^σ`.
    pub c_sigma: f64,
    pub bias_note: String,
}

/// Tabulates `ρ̂` on `r_grid` (monotone envelope applied) and `Θ̂σ`, `Θ̂1` on `s_grid`.
pub fn almost_periodicity_report(
    field: &CoefficientTensorField,
    r_grid: &[f64],
    s_grid: &[f64],
    sigma: f64,
    policy: &SamplingPolicy,
) -> Result<AlmostPeriodicityReport> {
    let mut rs = r_grid.to_vec();
    rs.sort_by(f64::total_cmp);
    let mut env = f64::INFINITY;
    let rho_samples: Vec<(f64, f64)> = rs
        .iter()
        .map(|&r| {
            env = env.min(rho_hat(field, r, policy));
            (r, env)
        })
        .collect();
    let mut theta_samples = Vec::new();
    let mut c_sigma: f64 = 0.0;
    for &s in s_grid {
        let ts = theta_hat(field, s, sigma, policy)?.value;
        let t1 = theta_hat(field, s, 1.0, policy)?.value;
        if t1 > 0.0 {
            c_sigma = c_sigma.max(ts / t1.powf(sigma));
        }
        theta_samples.push((s, sigma, ts));
    }
    Ok(AlmostPeriodicityReport {
        decay_fit: fit_decay(&rho_samples),
        rho_samples,
        theta_samples,
        c_sigma,
        bias_note: "surrogate: inner inf replaced by an atom-coefficient upper bound on a lattice of Z; outer sup sampled over low-discrepancy Y".into(),
    })
}

/// Input of [`mean_value`].
pub enum MeanInput<'a> {
    Symbolic(&'a CoefficientTensorField),
    Grid { field: &'a NodeField, component: usize },
}

/// Mean value `⟨f⟩`. Symbolic fields return their constant term entrywise;
/// grid fields return the volume average over `window`.
pub fn mean_value(input: MeanInput<'_>, window: Option<&Window>) -> Result<Vec<f64>> {
    match input {
        MeanInput::Symbolic(f) => Ok(f.constant_term.data.clone()),
        MeanInput::Grid { field, component } => {
            let w = window.ok_or_else(|| invalid("grid means need a window"))?;
            Ok(vec![window_mean(field, w, component)?])
        }
    }
}

/// Two-window Richardson estimate `2⟨f⟩_L − ⟨f⟩_{L/2}` for means with an
/// `O(1/L)` window error. The half window shares the lower corner.
pub fn richardson_mean(field: &NodeField, window: &Window, component: usize) -> Result<f64> {
    let full = window_mean(field, window, component)?;
    let half = Window {
        lower: window.lower.clone(),
        upper: window.lower.iter().zip(&window.upper).map(|(a, b)| a + 0.5 * (b - a)).collect(),
        time: window.time,
    };
    let h = window_mean(field, &half, component)?;
    Ok(2.0 * full - h)
}

/// On-disk field description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldFile {
    pub d: usize,
    pub m: usize,
    pub mu: f64,
    pub constant_term: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub atoms: Vec<AtomFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtomFile {
    pub k: Vec<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub phase: PhaseSpec,
    pub amplitude: Vec<Vec<Vec<Vec<f64>>>>,
}

/// A common phase, or one per tensor entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhaseSpec {
    Scalar(f64),
    PerEntry(Vec<Vec<Vec<Vec<f64>>>>),
}

impl Default for PhaseSpec {
    fn default() -> Self {
        PhaseSpec::Scalar(0.0)
    }
}

impl FieldFile {
    pub fn into_field(self) -> Result<CoefficientTensorField> {
        let a0 = CoefTensor::from_nested(&self.constant_term)?;
        if a0.d != self.d || a0.m != self.m {
            return Err(invalid("constant_term shape disagrees with d, m"));
        }
        let atoms = self
            .atoms
            .into_iter()
            .map(|a| {
                let amp = CoefTensor::from_nested(&a.amplitude)?;
                let phase = match a.phase {
                    PhaseSpec::Scalar(p) => vec![p; amp.data.len()],
                    PhaseSpec::PerEntry(n) => CoefTensor::from_nested(&n)?.data,
                };
                Ok(FrequencyAtom { k: a.k, lambda: a.lambda, amplitude: amp, phase })
            })
            .collect::<Result<Vec<_>>>()?;
        CoefficientTensorField::new(self.mu, a0, atoms)
    }

    pub fn from_field(f: &CoefficientTensorField) -> Self {
        FieldFile {
            d: f.d,
            m: f.m,
            mu: f.mu,
            constant_term: f.constant_term.to_nested(),
            atoms: f
                .atoms
                .iter()
                .map(|a| {
                    let uniform = a.phase.iter().all(|p| *p == a.phase[0]);
                    AtomFile {
                        k: a.k.clone(),
                        lambda: a.lambda,
                        phase: if uniform {
                            PhaseSpec::Scalar(a.phase[0])
                        } else {
                            PhaseSpec::PerEntry(CoefTensor { d: f.d, m: f.m, data: a.phase.clone() }.to_nested())
                        },
                        amplitude: a.amplitude.to_nested(),
                    }
                })
                .collect(),
        }
    }
}

pub fn field_from_json(text: &str) -> Result<CoefficientTensorField> {
    serde_json::from_str::<FieldFile>(text)?.into_field()
}

pub fn field_to_json(field: &CoefficientTensorField) -> String {
    serde_json::to_string_pretty(&FieldFile::from_field(field)).expect("field serializes")
}

/// Names of the fields shipped with the library.
pub const BUILTIN_FIELDS: &[&str] = &[
    "constant-1d",
    "constant-2d",
    "periodic-1d",
    "time-only-1d",
    "spacetime-periodic-1d",
    "quasiperiodic-1d",
    "periodic-2d",
    "system-1d",
];

fn scalar_atom(k: f64, lambda: f64, c: f64) -> FrequencyAtom {
    FrequencyAtom::new(vec![k], lambda, CoefTensor::scalar(1, 1, c), 0.0)
}

/// Harmonics kept in the Fourier expansion of `1/(1 + 0.5 cos 2πy)`.
pub const PERIODIC_HARMONICS: usize = 8;

/// Looks up a shipped field by name.
pub fn builtin_field(name: &str) -> Option<CoefficientTensorField> {
    let tau = 2.0 * PI;
    let f = match name {
        "constant-1d" => CoefficientTensorField::constant(1.0, CoefTensor::identity(1, 1)),
        "constant-2d" => CoefficientTensorField::constant(1.0, CoefTensor::identity(2, 1)),
        "periodic-1d" => {
            // 1/(1 + b cos θ) = (1/√(1−b²)) (1 + 2 Σ (−r)^n cos nθ), r = (1 − √(1−b²))/b
            let b: f64 = 0.5;
            let root = (1.0 - b * b).sqrt();
            let r = (1.0 - root) / b;
            let atoms = (1..=PERIODIC_HARMONICS)
                .map(|n| scalar_atom(tau * n as f64, 0.0, 2.0 / root * (-r).powi(n as i32)))
                .collect();
            CoefficientTensorField::new(0.45, CoefTensor::scalar(1, 1, 1.0 / root), atoms)
        }
        "time-only-1d" => CoefficientTensorField::new(0.6, CoefTensor::identity(1, 1), vec![scalar_atom(0.0, tau, 0.4)]),
        "spacetime-periodic-1d" => CoefficientTensorField::new(
            0.4,
            CoefTensor::identity(1, 1),
            vec![scalar_atom(tau, 0.0, 0.3), scalar_atom(0.0, tau, 0.3)],
        ),
        "quasiperiodic-1d" => CoefficientTensorField::new(
            0.4,
            CoefTensor::identity(1, 1),
            vec![scalar_atom(tau, 0.0, 0.3), scalar_atom(tau * 2f64.sqrt(), 0.0, 0.3)],
        ),
        "periodic-2d" => {
            let mut a0 = CoefTensor::identity(2, 1);
            a0.set(0, 1, 0, 0, 0.2);
            a0.set(1, 0, 0, 0, 0.2);
            let mut c1 = CoefTensor::zeros(2, 1);
            c1.set(0, 0, 0, 0, 0.3);
            c1.set(1, 1, 0, 0, 0.1);
            let mut c2 = CoefTensor::zeros(2, 1);
            c2.set(0, 0, 0, 0, 0.1);
            c2.set(1, 1, 0, 0, 0.3);
            c2.set(0, 1, 0, 0, 0.05);
            c2.set(1, 0, 0, 0, 0.05);
            CoefficientTensorField::new(
                0.4,
                a0,
                vec![
                    FrequencyAtom::new(vec![tau, 0.0], 0.0, c1, 0.0),
                    FrequencyAtom::new(vec![0.0, tau], 0.0, c2, 0.5),
                ],
            )
        }
        "system-1d" => {
            let mut a0 = CoefTensor::identity(1, 2);
            a0.set(0, 0, 0, 1, 0.2);
            a0.set(0, 0, 1, 0, 0.2);
            let mut c = CoefTensor::zeros(1, 2);
            c.set(0, 0, 0, 0, 0.3);
            c.set(0, 0, 1, 1, 0.2);
            c.set(0, 0, 0, 1, 0.1);
            c.set(0, 0, 1, 0, 0.1);
            CoefficientTensorField::new(0.4, a0, vec![FrequencyAtom::new(vec![tau], 0.0, c, 0.0)])
        }
        _ => return None,
    };
    Some(f.expect("builtin fields are well formed"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_atom(c: f64) -> CoefficientTensorField {
        CoefficientTensorField::new(0.05, CoefTensor::identity(1, 1), vec![scalar_atom(2.0 * PI, 0.0, c)]).unwrap()
    }

    #[test]
    fn evaluate_constant_and_single_atom() {
        let id = CoefficientTensorField::constant(1.0, CoefTensor::identity(2, 2)).unwrap();
        assert_eq!(id.evaluate(&[0.3, -1.7], 4.2), CoefTensor::identity(2, 2));
        let f = one_atom(0.5);
        assert_eq!(f.evaluate(&[0.0], 0.0).data[0], 1.5);
        assert!((f.evaluate(&[0.25], 0.0).data[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn periodic_builtin_reproduces_closed_form() {
        let f = builtin_field("periodic-1d").unwrap();
        for i in 0..50 {
            let y = i as f64 / 50.0;
            let exact = 1.0 / (1.0 + 0.5 * (2.0 * PI * y).cos());
            assert!((f.evaluate(&[y], 0.0).data[0] - exact).abs() < 5e-5);
        }
    }

    #[test]
    fn ellipticity_extremes_match_grid_minimum() {
        // oracle: minimize 1 + 0.9 cos over a fine grid
        let oracle = (0..100_000).map(|i| 1.0 + 0.9 * (2.0 * PI * i as f64 / 1e5).cos()).fold(f64::INFINITY, f64::min);
        let f = one_atom(0.9);
        let rep = ellipticity_extremes(&f, 20_000, 3).unwrap();
        assert!((rep.min_quotient - oracle).abs() < 1e-3);
        let strict = CoefficientTensorField { mu: 0.2, ..f };
        assert!(matches!(verify_ellipticity(&strict, 20_000, 3), Err(Error::EllipticityViolation { .. })));
    }

    #[test]
    fn ellipticity_of_diagonal_constant() {
        let mut a0 = CoefTensor::zeros(2, 1);
        a0.set(0, 0, 0, 0, 2.0);
        a0.set(1, 1, 0, 0, 3.0);
        let f = CoefficientTensorField::constant(1.0 / 3.0, a0).unwrap();
        let rep = verify_ellipticity(&f, 10, 0).unwrap();
        assert!((rep.min_quotient - 2.0).abs() < 1e-12 && (rep.max_quotient - 3.0).abs() < 1e-12);
        let id = CoefficientTensorField::constant(1.0, CoefTensor::identity(1, 1)).unwrap();
        let rep = verify_ellipticity(&id, 5, 1).unwrap();
        assert_eq!((rep.min_quotient, rep.max_quotient), (1.0, 1.0));
    }

    #[test]
    fn rho_vanishes_for_constant_field() {
        let f = builtin_field("constant-1d").unwrap();
        assert_eq!(rho_hat(&f, 0.5, &SamplingPolicy::default()), 0.0);
        assert_eq!(theta_hat(&f, 4.0, 0.5, &SamplingPolicy::default()).unwrap().value, 0.0);
    }

    #[test]
    fn rho_vanishes_beyond_period_diagonal() {
        let f = builtin_field("spacetime-periodic-1d").unwrap();
        let pol = SamplingPolicy::default();
        for r in [2f64.sqrt(), 2.0, 10.0, 100.0] {
            assert!(rho_hat(&f, r, &pol) <= 1e-12, "R={r}");
        }
        for s in [2.0, 4.0, 16.0, 64.0] {
            let th = theta_hat(&f, s, 0.5, &pol).unwrap().value;
            assert!(th <= (2f64.sqrt() / s).sqrt() + 1e-12, "S={s} theta={th}");
        }
    }

    #[test]
    fn kronecker_points_fill_unit_interval() {
        let pts: Vec<f64> = (0..1000).map(|n| kronecker_point(n, 1)[0]).collect();
        for bin in 0..10 {
            let c = pts.iter().filter(|&&u| (u * 10.0).floor() as usize == bin).count();
            assert!((90..=110).contains(&c));
        }
    }

    #[test]
    fn json_round_trip() {
        for name in BUILTIN_FIELDS {
            let f = builtin_field(name).unwrap();
            let back = field_from_json(&field_to_json(&f)).unwrap();
            assert_eq!(back, f, "{name}");
        }
        let text = r#"{"d":1,"m":1,"mu":0.5,"constant_term":[[[[1.0]]]],
            "atoms":[{"k":[6.283185307179586],"lambda":0.0,"phase":[[[[0.25]]]],"amplitude":[[[[0.5]]]]}]}"#;
        let f = field_from_json(text).unwrap();
        assert_eq!(f.atoms[0].phase, vec![0.25]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let text = r#"{"d":2,"m":1,"mu":0.5,"constant_term":[[[[1.0]]]]}"#;
        assert!(field_from_json(text).is_err());
        assert!(CoefficientTensorField::constant(1.5, CoefTensor::identity(1, 1)).is_err());
    }

    #[test]
    fn adjoint_is_involutive_and_transposes() {
        let f = builtin_field("system-1d").unwrap();
        assert_eq!(f.adjoint().adjoint(), f);
        let mut a0 = CoefTensor::zeros(2, 1);
        a0.set(0, 1, 0, 0, 0.3);
        assert_eq!(a0.adjoint().get(1, 0, 0, 0), 0.3);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let f = builtin_field("periodic-2d").unwrap();
        let x = [0.31, 0.77];
        let mut exact = vec![0.0; 8];
        f.grad_into(&x, 0.0, &mut exact);
        let mut fd = vec![0.0; 8];
        ConstantlessFd(&f).grad_into(&x, 0.0, &mut fd);
        for (a, b) in exact.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    struct ConstantlessFd<'a>(&'a CoefficientTensorField);
    impl CoefficientSource for ConstantlessFd<'_> {
        fn dim(&self) -> usize {
            self.0.d
        }
        fn components(&self) -> usize {
            self.0.m
        }
        fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
            self.0.eval_into(x, t, out)
        }
        fn is_time_independent(&self) -> bool {
            true
        }
    }
}
