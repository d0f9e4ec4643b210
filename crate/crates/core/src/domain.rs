//! Spatial domains: boxes and Lipschitz graph domains above `x_d = ψ(x')`.
//!
//! A graph domain in two dimensions is realized on the reference rectangle
//! `(−W, W) × (0, D)` through the shear `x = (ξ₁, ξ₂ + ψ(ξ₁))`, which has unit
//! Jacobian determinant. In one dimension it is the interval `(0, D)`.

use serde::{Deserialize, Serialize};

use crate::apfield::CoefficientSource;
use crate::error::{invalid, Result};
use crate::mesh::{build_grid, BoundaryKind, GridSpec, SpaceTimeGrid};

/// Closed-form graph functions with `ψ(0) = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GraphFunction {
    Flat,
    /// `A(1 − cos k s)`.
    Cosine { amplitude: f64, k: f64 },
    /// `c|s|^{1+α}`.
    Power { c: f64, alpha: f64 },
}

impl GraphFunction {
    pub fn value(&self, s: f64) -> f64 {
        match *self {
            GraphFunction::Flat => 0.0,
            GraphFunction::Cosine { amplitude, k } => amplitude * (1.0 - (k * s).cos()),
            GraphFunction::Power { c, alpha } => c * s.abs().powf(1.0 + alpha),
        }
    }

    pub fn slope(&self, s: f64) -> f64 {
        match *self {
            GraphFunction::Flat => 0.0,
            GraphFunction::Cosine { amplitude, k } => amplitude * k * (k * s).sin(),
            GraphFunction::Power { c, alpha } => c * (1.0 + alpha) * s.abs().powf(alpha) * s.signum(),
        }
    }
}

/// `{x_d > ψ(x')}` near the origin, with the bound `M` on `‖ψ‖_{C^{1,α}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDomain {
    pub psi: GraphFunction,
    pub m_bound: f64,
    pub alpha: f64,
}

impl GraphDomain {
    pub fn flat() -> Self {
        GraphDomain { psi: GraphFunction::Flat, m_bound: 1.0, alpha: 1.0 }
    }

    /// `‖ψ‖∞ + ‖ψ'‖∞ + [ψ']_α` sampled on `n` points of `[−w, w]`.
    pub fn c1alpha_norm(&self, w: f64, n: usize) -> f64 {
        let s: Vec<f64> = (0..=n).map(|i| -w + 2.0 * w * i as f64 / n as f64).collect();
        let v: Vec<f64> = s.iter().map(|&x| self.psi.value(x)).collect();
        let dv: Vec<f64> = s.iter().map(|&x| self.psi.slope(x)).collect();
        let sup = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let dsup = dv.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let mut hold = 0.0f64;
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                hold = hold.max((dv[i] - dv[j]).abs() / (s[j] - s[i]).powf(self.alpha));
            }
        }
        sup + dsup + hold
    }

    /// Whether the sampled norm respects `M`.
    pub fn within_bound(&self, w: f64) -> bool {
        self.c1alpha_norm(w, 400) <= self.m_bound * (1.0 + 1e-9)
    }

    /// Point of the cylinder `T_r = {|x'| < r, ψ(x') < x_d < ψ(x') + r}`.
    pub fn in_tr(&self, x: &[f64], r: f64) -> bool {
        match x.len() {
            1 => x[0] > 0.0 && x[0] < r,
            _ => {
                let b = self.psi.value(x[0]);
                x[0].abs() < r && x[1] > b && x[1] < b + r
            }
        }
    }

    /// Point of the boundary patch `I_r = {|x'| < r, x_d = ψ(x')}` up to `tol`.
    pub fn on_ir(&self, x: &[f64], r: f64, tol: f64) -> bool {
        match x.len() {
            1 => x[0].abs() <= tol,
            _ => x[0].abs() < r && (x[1] - self.psi.value(x[0])).abs() <= tol,
        }
    }
}

/// Computational domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Domain {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `d = 1`: `(0, depth)`; `d = 2`: `{|x₁| < half_width, ψ(x₁) < x₂ < ψ(x₁) + depth}`.
    Graph { graph: GraphDomain, d: usize, half_width: f64, depth: f64 },
}

impl Domain {
    pub fn interval(a: f64, b: f64) -> Self {
        Domain::Box { lower: vec![a], upper: vec![b] }
    }

    pub fn unit_box(d: usize) -> Self {
        Domain::Box { lower: vec![0.0; d], upper: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lower, .. } => lower.len(),
            Domain::Graph { d, .. } => *d,
        }
    }

    /// Reference box carrying the grid.
    pub fn reference_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Box { lower, upper } => (lower.clone(), upper.clone()),
            Domain::Graph { d: 1, depth, .. } => (vec![0.0], vec![*depth]),
            Domain::Graph { half_width, depth, .. } => (vec![-half_width, 0.0], vec![*half_width, *depth]),
        }
    }

    /// Dirichlet grid over the reference box.
    pub fn grid(&self, h: f64, t: (f64, f64), dt: f64, m: usize) -> Result<SpaceTimeGrid> {
        if let Domain::Graph { d, .. } = self {
            if *d > 2 {
                return Err(invalid("graph domains are realized for d = 1, 2 only"));
            }
        }
        let (lower, upper) = self.reference_box();
        let d = lower.len();
        build_grid(GridSpec { lower, upper, h, t0: t.0, t1: t.1, dt, bc: vec![[BoundaryKind::Dirichlet; 2]; d], m })
    }

    /// Physical point of a reference point.
    pub fn physical(&self, xi: &[f64]) -> Vec<f64> {
        match self {
            Domain::Graph { graph, d: 2, .. } => vec![xi[0], xi[1] + graph.psi.value(xi[0])],
            _ => xi.to_vec(),
        }
    }

    /// Distance from a physical point to the boundary (zero outside).
    pub fn distance_to_boundary(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Box { lower, upper } => {
                let mut best = f64::INFINITY;
                for a in 0..lower.len() {
                    best = best.min(x[a] - lower[a]).min(upper[a] - x[a]);
                }
                best.max(0.0)
            }
            Domain::Graph { d: 1, depth, .. } => x[0].min(depth - x[0]).max(0.0),
            Domain::Graph { graph, half_width, depth, .. } => {
                let (w, dep) = (*half_width, *depth);
                let b = graph.psi.value(x[0]);
                if x[0].abs() >= w || x[1] <= b || x[1] >= b + dep {
                    return 0.0;
                }
                let bottom = curve_distance(&graph.psi, 0.0, w, x);
                let top = curve_distance(&graph.psi, dep, w, x);
                let side = |s: f64| {
                    let lo = graph.psi.value(s);
                    let dy = if x[1] < lo { lo - x[1] } else if x[1] > lo + dep { x[1] - lo - dep } else { 0.0 };
                    ((x[0] - s).powi(2) + dy * dy).sqrt()
                };
                bottom.min(top).min(side(-w)).min(side(w))
            }
        }
    }

    /// Distance from the boundary of a reference node.
    pub fn node_distance(&self, grid: &SpaceTimeGrid, node: usize) -> f64 {
        self.distance_to_boundary(&self.physical(&grid.node_coords(node)))
    }
}

/// Distance from `x` to `{(s, ψ(s) + c) : |s| ≤ w}`: dense scan, then a
/// golden-section refinement of the best bracket.
fn curve_distance(psi: &GraphFunction, c: f64, w: f64, x: &[f64]) -> f64 {
    let dist2 = |s: f64| (x[0] - s).powi(2) + (x[1] - psi.value(s) - c).powi(2);
    let n = 1024;
    let step = 2.0 * w / n as f64;
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..=n {
        let v = dist2(-w + i as f64 * step);
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    let (mut a, mut b) = ((-w + (best as f64 - 1.0) * step).max(-w), (-w + (best as f64 + 1.0) * step).min(w));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c1 = b - g * (b - a);
        let c2 = a + g * (b - a);
        if dist2(c1) < dist2(c2) {
            b = c2;
        } else {
            a = c1;
        }
    }
    best_v.min(dist2(0.5 * (a + b))).sqrt()
}

/// Coefficients pulled back to the reference rectangle of a two-dimensional
/// graph domain: `Ã(ξ) = J⁻¹ A(Φ(ξ)) J⁻ᵀ` with `J = DΦ`.
pub struct Mapped<'a> {
    pub inner: &'a dyn CoefficientSource,
    pub psi: GraphFunction,
}

impl CoefficientSource for Mapped<'_> {
    fn dim(&self) -> usize {
        2
    }
    fn components(&self) -> usize {
        self.inner.components()
    }
    fn eval_into(&self, xi: &[f64], t: f64, out: &mut [f64]) {
        let m = self.components();
        let x = [xi[0], xi[1] + self.psi.value(xi[0])];
        let mut a = vec![0.0; 4 * m * m];
        self.inner.eval_into(&x, t, &mut a);
        // J⁻¹ = [[1, 0], [−ψ', 1]]
        let p = self.psi.slope(xi[0]);
        let jinv = [[1.0, 0.0], [-p, 1.0]];
        let idx = |i: usize, j: usize, al: usize, be: usize| ((i * 2 + j) * m + al) * m + be;
        for al in 0..m {
            for be in 0..m {
                for i in 0..2 {
                    for j in 0..2 {
                        let mut v = 0.0;
                        for k in 0..2 {
                            for l in 0..2 {
                                v += jinv[i][k] * a[idx(k, l, al, be)] * jinv[j][l];
                            }
                        }
                        out[idx(i, j, al, be)] = v;
                    }
                }
            }
        }
    }
    fn is_time_independent(&self) -> bool {
        self.inner.is_time_independent()
    }
}
