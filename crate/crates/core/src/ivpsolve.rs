//! Initial-Dirichlet problems `(∂_t + L_ε)u_ε = F` and `(∂_t + L₀)u₀ = F`,
//! and the fundamental-solution probe.
//!
//! Closed-form data are named expression kinds with parameter arrays:
//! `constant [c]`, `sine-product [A, k, rate]` for `A Π sin(k x_i) e^{−rate t}`,
//! and `bump [A, r, c_1..c_d]` for `A (1 − |x − c|²/r²)⁴₊`.

use serde::{Deserialize, Serialize};

use crate::apfield::{CoefTensor, CoefficientSource, CoefficientTensorField, ConstantCoefficients, Scaled};
use crate::domain::{Domain, Mapped};
use crate::error::{invalid, Error, Result};
use crate::linalg::fit_line;
use crate::mesh::{build_grid, BoundaryKind, GridSpec, Marcher, NodeField, SpaceTimeGrid, StepOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExprKind {
    Zero,
    Constant,
    SineProduct,
    Bump,
}

/// Named closed-form expression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expr {
    pub kind: ExprKind,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl Expr {
    pub fn zero() -> Self {
        Expr { kind: ExprKind::Zero, params: vec![] }
    }
    pub fn constant(c: f64) -> Self {
        Expr { kind: ExprKind::Constant, params: vec![c] }
    }
    pub fn sine_product(amplitude: f64, k: f64, rate: f64) -> Self {
        Expr { kind: ExprKind::SineProduct, params: vec![amplitude, k, rate] }
    }
    pub fn bump(amplitude: f64, radius: f64, center: &[f64]) -> Self {
        let mut params = vec![amplitude, radius];
        params.extend_from_slice(center);
        Expr { kind: ExprKind::Bump, params }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let need = match self.kind {
            ExprKind::Zero => 0,
            ExprKind::Constant => 1,
            ExprKind::SineProduct => 3,
            ExprKind::Bump => 2 + d,
        };
        if self.params.len() != need {
            return Err(invalid(format!("{:?} expects {need} parameters, got {}", self.kind, self.params.len())));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(invalid("expression parameters must be finite"));
        }
        if self.kind == ExprKind::Bump && !(self.params[1] > 0.0) {
            return Err(invalid("bump radius must be positive"));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        let p = &self.params;
        match self.kind {
            ExprKind::Zero => 0.0,
            ExprKind::Constant => p[0],
            ExprKind::SineProduct => p[0] * x.iter().map(|&v| (p[1] * v).sin()).product::<f64>() * (-p[2] * t).exp(),
            ExprKind::Bump => {
                let r2: f64 = x.iter().zip(&p[2..]).map(|(a, c)| (a - c).powi(2)).sum::<f64>() / (p[1] * p[1]);
                if r2 < 1.0 {
                    p[0] * (1.0 - r2).powi(4)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self.kind {
            ExprKind::Zero => true,
            ExprKind::Constant | ExprKind::SineProduct | ExprKind::Bump => self.params[0] == 0.0,
        }
    }
}

/// Problem data: a closed form, or values on every node of every grid level.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Expr(Expr),
    Nodes(NodeField),
}

impl Source {
    pub fn zero() -> Self {
        Source::Expr(Expr::zero())
    }
}

/// Which levels a solve keeps.
#[derive(Clone, Debug, PartialEq)]
pub enum RecordPlan {
    All,
    /// About this many levels, evenly strided, always including both ends.
    Count(usize),
    /// Explicit level indices (the final level is always kept).
    Levels(Vec<usize>),
    Final,
}

/// `(∂_t + L)u = F` in `Ω × (0, T)`, `u = g` on `∂Ω × (0, T)`, `u = h` at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub domain: Domain,
    pub t_final: f64,
    pub forcing: Source,
    pub lateral: Expr,
    pub initial: Expr,
    pub eps: f64,
    /// Spatial step; defaults `1/⌈16/ε⌉` (oscillatory) and `1/128` (effective).
    pub h: Option<f64>,
    /// Time step; defaults `≤ ε²/16` (oscillatory) and `≤ 4h²` (effective), tiling `T`.
    pub dt: Option<f64>,
    pub check_compatibility: bool,
    pub record: RecordPlan,
    pub m: usize,
}

impl ProblemSpec {
    /// Scalar problem on `(0, 1)` with `g = h = 0`.
    pub fn unit_interval(eps: f64, t_final: f64, forcing: Expr) -> Self {
        ProblemSpec {
            domain: Domain::interval(0.0, 1.0),
            t_final,
            forcing: Source::Expr(forcing),
            lateral: Expr::zero(),
            initial: Expr::zero(),
            eps,
            h: None,
            dt: None,
            check_compatibility: true,
            record: RecordPlan::Count(128),
            m: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyRow {
    pub t: f64,
    /// `‖u(t)‖²_{L²}`.
    pub l2_sq: f64,
    /// `∫₀ᵗ ‖∇u‖²_{L²}` (reference-coordinate gradient).
    pub dissipation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverMeta {
    pub eps: Option<f64>,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    pub max_iterations: usize,
    pub max_residual: f64,
}

/// A recorded trajectory with its energy record.
#[derive(Clone, Debug)]
pub struct SolutionField {
    pub u: NodeField,
    pub domain: Domain,
    pub energy: Vec<EnergyRow>,
    pub meta: SolverMeta,
}

fn tiling_step(len: f64, target: f64) -> f64 {
    len / (len / target).ceil()
}

/// Checks the ε-resolution rule `h ≤ ε/16`, `dt ≤ ε²/16`.
pub fn check_resolution(eps: f64, h: f64, dt: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(invalid(format!("eps={eps} must be positive")));
    }
    if h > eps / 16.0 * (1.0 + 1e-12) {
        return Err(Error::UnresolvedOscillation(format!("h={h} exceeds eps/16={}", eps / 16.0)));
    }
    if dt > eps * eps / 16.0 * (1.0 + 1e-12) {
        return Err(Error::UnresolvedOscillation(format!("dt={dt} exceeds eps²/16={}", eps * eps / 16.0)));
    }
    Ok(())
}

/// Grid step and time step an oscillatory solve will use.
pub fn eps_steps(problem: &ProblemSpec) -> (f64, f64) {
    let eps = problem.eps;
    let h = problem.h.unwrap_or(1.0 / (16.0 / eps).ceil());
    let dt = problem.dt.unwrap_or_else(|| tiling_step(problem.t_final, eps * eps / 16.0));
    (h, dt)
}

/// Backward-Euler trajectory of the oscillatory problem with `A(x/ε, t/ε²)`.
pub fn solve_eps(field: &CoefficientTensorField, problem: &ProblemSpec) -> Result<SolutionField> {
    let (h, dt) = eps_steps(problem);
    check_resolution(problem.eps, h, dt)?;
    let scaled = Scaled::new(field, problem.eps);
    let mut sol = solve_with(&scaled, problem, h, dt)?;
    sol.meta.eps = Some(problem.eps);
    Ok(sol)
}

/// Constant-coefficient trajectory with the effective tensor.
pub fn solve_effective(a_hat: &CoefTensor, problem: &ProblemSpec) -> Result<SolutionField> {
    let (lo, _) = a_hat.form_extremes();
    if !(lo > 0.0) {
        return Err(invalid(format!("effective tensor is not elliptic (smallest form value {lo})")));
    }
    let h = problem.h.unwrap_or(1.0 / 128.0);
    let dt = problem.dt.unwrap_or_else(|| tiling_step(problem.t_final, 4.0 * h * h));
    solve_with(&ConstantCoefficients(a_hat.clone()), problem, h, dt)
}

/// Solves with any coefficient source given in physical coordinates.
pub fn solve_with(coef: &dyn CoefficientSource, problem: &ProblemSpec, h: f64, dt: f64) -> Result<SolutionField> {
    let d = problem.domain.dim();
    if coef.dim() != d || coef.components() != problem.m {
        return Err(invalid("coefficient shape does not match the problem"));
    }
    problem.lateral.validate(d)?;
    problem.initial.validate(d)?;
    if let Source::Expr(e) = &problem.forcing {
        e.validate(d)?;
    }
    let grid = problem.domain.grid(h, (0.0, problem.t_final), dt, problem.m)?;
    let mapped;
    let coef: &dyn CoefficientSource = match &problem.domain {
        Domain::Graph { graph, d: 2, .. } => {
            mapped = Mapped { inner: coef, psi: graph.psi.clone() };
            &mapped
        }
        _ => coef,
    };
    march(coef, problem, &grid)
}

fn physical_nodes(domain: &Domain, grid: &SpaceTimeGrid) -> Vec<Vec<f64>> {
    (0..grid.n_nodes()).map(|p| domain.physical(&grid.node_coords(p))).collect()
}

fn march(coef: &dyn CoefficientSource, problem: &ProblemSpec, grid: &SpaceTimeGrid) -> Result<SolutionField> {
    let m = problem.m;
    let nn = grid.n_nodes();
    let xs = physical_nodes(&problem.domain, grid);
    if problem.check_compatibility {
        for p in 0..nn {
            if grid.is_boundary_node(p) {
                let gap = (problem.lateral.value(&xs[p], 0.0) - problem.initial.value(&xs[p], 0.0)).abs();
                if gap > 1e-10 {
                    return Err(invalid(format!("lateral and initial data disagree by {gap:e} at {:?}", xs[p])));
                }
            }
        }
    }
    if let Source::Nodes(f) = &problem.forcing {
        if f.n_levels() != grid.n_levels() || f.grid().n_nodes() != nn || f.n_comp() != m {
            return Err(invalid("nodal forcing must cover every node and level of the grid"));
        }
    }
    let steps = grid.steps();
    let keep: Vec<bool> = match &problem.record {
        RecordPlan::All => vec![true; steps + 1],
        RecordPlan::Final => (0..=steps).map(|l| l == steps).collect(),
        RecordPlan::Count(n) => {
            let stride = (steps / (*n).max(1)).max(1);
            (0..=steps).map(|l| l % stride == 0 || l == steps).collect()
        }
        RecordPlan::Levels(v) => {
            let mut k = vec![false; steps + 1];
            for &l in v {
                if l <= steps {
                    k[l] = true;
                }
            }
            k[steps] = true;
            k
        }
    };
    let mut u = vec![0.0; nn * m];
    for p in 0..nn {
        for a in 0..m {
            u[p * m + a] = problem.initial.value(&xs[p], 0.0);
        }
    }
    let mut marcher = Marcher::new(coef, grid, 0.0, StepOptions::default())?;
    let lateral = &problem.lateral;
    let domain = &problem.domain;
    let bc = move |x: &[f64], _: usize, t: f64| lateral.value(&domain.physical(x), t);
    let mut times = Vec::new();
    let mut data = Vec::new();
    let mut energy = Vec::with_capacity(steps + 1);
    let mut dissipation = 0.0;
    energy.push(EnergyRow { t: 0.0, l2_sq: l2_sq(grid, &u, m), dissipation });
    if keep[0] {
        times.push(0.0);
        data.extend_from_slice(&u);
    }
    let mut forcing = vec![0.0; nn * m];
    let (mut max_it, mut max_res) = (0usize, 0.0f64);
    for l in 1..=steps {
        let t = grid.time(l);
        match &problem.forcing {
            Source::Expr(e) => {
                for p in 0..nn {
                    let v = e.value(&xs[p], t);
                    for a in 0..m {
                        forcing[p * m + a] = v;
                    }
                }
            }
            Source::Nodes(f) => forcing.copy_from_slice(f.level(l)),
        }
        let stats = marcher.step(&mut u, t, Some(&forcing), Some(&bc))?;
        max_it = max_it.max(stats.iterations);
        max_res = max_res.max(stats.relative_residual);
        dissipation += grid.dt() * grad_sq(grid, &u, m);
        energy.push(EnergyRow { t, l2_sq: l2_sq(grid, &u, m), dissipation });
        if keep[l] {
            times.push(t);
            data.extend_from_slice(&u);
        }
    }
    if energy.iter().any(|e| !e.l2_sq.is_finite()) {
        return Err(Error::SolverDivergence { iterations: max_it, residual: f64::NAN });
    }
    Ok(SolutionField {
        u: NodeField::from_data(grid, times, m, data)?,
        domain: problem.domain.clone(),
        energy,
        meta: SolverMeta { eps: None, h: grid.h(), dt: grid.dt(), steps, max_iterations: max_it, max_residual: max_res },
    })
}

fn l2_sq(grid: &SpaceTimeGrid, u: &[f64], m: usize) -> f64 {
    let mut acc = 0.0;
    for p in 0..grid.n_nodes() {
        let w = grid.quadrature_weight(p);
        for a in 0..m {
            acc += w * u[p * m + a].powi(2);
        }
    }
    acc
}

fn grad_sq(grid: &SpaceTimeGrid, u: &[f64], m: usize) -> f64 {
    let h = grid.h();
    let cell = h.powi(grid.dim() as i32);
    let mut acc = 0.0;
    for p in 0..grid.n_nodes() {
        for ax in 0..grid.dim() {
            if let Some(q) = grid.neighbor(p, ax, 1) {
                for a in 0..m {
                    acc += cell * ((u[q * m + a] - u[p * m + a]) / h).powi(2);
                }
            }
        }
    }
    acc
}

/// Four-point Lagrange weights for `u` (in node units) on `n` nodes.
fn cubic_stencil(u: f64, n: usize) -> (usize, [f64; 4]) {
    if n < 4 {
        let i = (u.floor().max(0.0) as usize).min(n.saturating_sub(2));
        let f = (u - i as f64).clamp(0.0, 1.0);
        return (i, [1.0 - f, f, 0.0, 0.0]);
    }
    let i0 = ((u.floor() as isize) - 1).clamp(0, n as isize - 4) as usize;
    let x = u - i0 as f64;
    let mut w = [0.0; 4];
    for (k, wk) in w.iter_mut().enumerate() {
        let mut v = 1.0;
        for j in 0..4 {
            if j != k {
                v *= (x - j as f64) / (k as f64 - j as f64);
            }
        }
        *wk = v;
    }
    (i0, w)
}

fn time_stencil(times: &[f64], t: f64) -> (usize, Vec<f64>) {
    let n = times.len();
    if n == 1 {
        return (0, vec![1.0]);
    }
    let k = times.partition_point(|&s| s <= t).saturating_sub(1);
    let width = n.min(4);
    let i0 = (k as isize - 1).clamp(0, (n - width) as isize) as usize;
    let t = t.clamp(times[0], times[n - 1]);
    let w = (0..width)
        .map(|a| {
            let mut v = 1.0;
            for b in 0..width {
                if b != a {
                    v *= (t - times[i0 + b]) / (times[i0 + a] - times[i0 + b]);
                }
            }
            v
        })
        .collect();
    (i0, w)
}

/// Cubic Lagrange interpolation of a Dirichlet-grid field in space and over
/// recorded levels in time (clamped to the recorded range).
pub fn interpolate_cubic(f: &NodeField, x: &[f64], t: f64, comp: usize) -> f64 {
    let g = f.grid();
    let d = g.dim();
    let mut bases = Vec::with_capacity(d);
    for a in 0..d {
        let n = g.nodes_per_axis()[a];
        let u = ((x[a] - g.spec().lower[a]) / g.h()).clamp(0.0, (n - 1) as f64);
        bases.push(cubic_stencil(u, n));
    }
    let (l0, wt) = time_stencil(f.times(), t);
    let mut acc = 0.0;
    let mut idx = vec![0usize; d];
    for flat in 0..4usize.pow(d as u32) {
        let mut w = 1.0;
        let mut rest = flat;
        for a in 0..d {
            let k = rest % 4;
            rest /= 4;
            w *= bases[a].1[k];
            idx[a] = (bases[a].0 + k).min(g.nodes_per_axis()[a] - 1);
        }
        if w == 0.0 {
            continue;
        }
        let p = g.node_index(&idx);
        for (k, wk) in wt.iter().enumerate() {
            acc += w * wk * f.at(l0 + k, p, comp);
        }
    }
    acc
}

/// Cubic resampling of a Dirichlet-grid field onto another grid covering the
/// same box, at the given times.
pub fn resample(src: &NodeField, target: &SpaceTimeGrid, times: &[f64]) -> NodeField {
    let g = src.grid();
    let d = g.dim();
    let nc = src.n_comp();
    // spatial pass on every source level
    let stencils: Vec<Vec<(usize, [f64; 4])>> = (0..target.n_nodes())
        .map(|p| {
            let x = target.node_coords(p);
            (0..d)
                .map(|a| {
                    let n = g.nodes_per_axis()[a];
                    cubic_stencil(((x[a] - g.spec().lower[a]) / g.h()).clamp(0.0, (n - 1) as f64), n)
                })
                .collect()
        })
        .collect();
    let mut space = vec![0.0; src.n_levels() * target.n_nodes() * nc];
    let mut idx = vec![0usize; d];
    for (p, st) in stencils.iter().enumerate() {
        for flat in 0..4usize.pow(d as u32) {
            let mut w = 1.0;
            let mut rest = flat;
            for a in 0..d {
                let k = rest % 4;
                rest /= 4;
                w *= st[a].1[k];
                idx[a] = (st[a].0 + k).min(g.nodes_per_axis()[a] - 1);
            }
            if w == 0.0 {
                continue;
            }
            let q = g.node_index(&idx);
            for l in 0..src.n_levels() {
                for c in 0..nc {
                    space[(l * target.n_nodes() + p) * nc + c] += w * src.at(l, q, c);
                }
            }
        }
    }
    let len = target.n_nodes() * nc;
    let mut data = Vec::with_capacity(times.len() * len);
    for &t in times {
        let (l0, wt) = time_stencil(src.times(), t);
        let start = data.len();
        data.resize(start + len, 0.0);
        for (k, w) in wt.iter().enumerate() {
            let lv = &space[(l0 + k) * len..(l0 + k + 1) * len];
            for (o, v) in data[start..].iter_mut().zip(lv) {
                *o += w * v;
            }
        }
    }
    NodeField::from_data(&target.with_components(nc), times.to_vec(), nc, data).expect("resampled shape")
}

/// Cubic time interpolation weights over recorded levels: first level and weights.
pub fn time_weights(times: &[f64], t: f64) -> (usize, Vec<f64>) {
    time_stencil(times, t)
}

/// Derivative along `axis` at a node: centered inside, second-order one-sided at faces.
fn node_derivative(f: &NodeField, l: usize, p: usize, axis: usize, c: usize) -> f64 {
    let g = f.grid();
    let h = g.h();
    match (g.neighbor(p, axis, -1), g.neighbor(p, axis, 1)) {
        (Some(a), Some(b)) => (f.at(l, b, c) - f.at(l, a, c)) / (2.0 * h),
        (None, Some(b)) => {
            let b2 = g.neighbor(b, axis, 1).unwrap_or(b);
            (-3.0 * f.at(l, p, c) + 4.0 * f.at(l, b, c) - f.at(l, b2, c)) / (2.0 * h)
        }
        (Some(a), None) => {
            let a2 = g.neighbor(a, axis, -1).unwrap_or(a);
            (3.0 * f.at(l, p, c) - 4.0 * f.at(l, a, c) + f.at(l, a2, c)) / (2.0 * h)
        }
        (None, None) => 0.0,
    }
}

/// Spatial gradient of every component, layout `[k][c]`.
pub fn gradient_field(f: &NodeField) -> NodeField {
    let g = f.grid();
    let (d, nc) = (g.dim(), f.n_comp());
    let mut out = NodeField::zeros(&g.with_components(d * nc), f.times().to_vec(), d * nc);
    for l in 0..f.n_levels() {
        for p in 0..g.n_nodes() {
            for k in 0..d {
                for c in 0..nc {
                    out.set(l, p, k * nc + c, node_derivative(f, l, p, k, c));
                }
            }
        }
    }
    out
}

/// Time derivative over recorded levels (one-sided at the ends), same layout as `f`.
pub fn time_derivative(f: &NodeField) -> NodeField {
    let mut out = f.clone();
    let t = f.times();
    let n = f.n_levels();
    for l in 0..n {
        let (a, b) = if n == 1 { (0, 0) } else if l == 0 { (0, 1) } else if l + 1 == n { (n - 2, n - 1) } else { (l - 1, l + 1) };
        for k in 0..f.level_len() {
            let v = if a == b { 0.0 } else { (f.level(b)[k] - f.level(a)[k]) / (t[b] - t[a]) };
            out.level_mut(l)[k] = v;
        }
    }
    out
}

/// Where the probe lives: a periodic box around the pole (whole-space
/// proxy) or a bounded Dirichlet domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ProbeDomain {
    Periodic { half_width: f64 },
    Bounded { domain: Domain },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOptions {
    pub domain: ProbeDomain,
    pub h: Option<f64>,
    pub dt: Option<f64>,
    /// Largest `|x − y|²/(t − s)` used in the envelope fit.
    pub z_max: f64,
    /// Steps discarded after the discrete delta.
    pub skip_steps: usize,
    /// Levels used in the fit (evenly strided).
    pub fit_levels: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            domain: ProbeDomain::Periodic { half_width: 2.0 },
            h: None,
            dt: None,
            z_max: 16.0,
            skip_steps: 4,
            fit_levels: 64,
        }
    }
}

/// Gaussian envelope fit `Γ ≈ C τ^{−d/2} exp(−κ|x−y|²/τ)` and companions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FundamentalProbe {
    pub eps: f64,
    pub kappa: f64,
    pub c: f64,
    pub r_squared: f64,
    pub n_samples: usize,
    /// `max Γ (|x−y| + τ^{1/2})^d` over fit samples.
    pub c_pointwise: f64,
    /// `(t, ∫Γ dx)` on fit levels.
    pub mass: Vec<(f64, f64)>,
    pub mass_drift: f64,
    /// Fitted exponent of `Γ ~ δ(x)^σ` near the boundary (bounded domains).
    pub boundary_sigma: Option<f64>,
}

struct ProbeRun {
    grid: SpaceTimeGrid,
    pole_node: usize,
    levels: Vec<(f64, Vec<f64>)>,
}

fn probe_grid(d: usize, pole: &[f64], horizon: f64, opts: &ProbeOptions, h: f64, dt: f64) -> Result<(SpaceTimeGrid, Option<Domain>)> {
    match &opts.domain {
        ProbeDomain::Periodic { half_width } => {
            let spec = GridSpec {
                lower: pole.iter().map(|y| y - half_width).collect(),
                upper: pole.iter().map(|y| y + half_width).collect(),
                h,
                t0: 0.0,
                t1: horizon,
                dt,
                bc: vec![[BoundaryKind::Periodic; 2]; d],
                m: 1,
            };
            Ok((build_grid(spec)?, None))
        }
        ProbeDomain::Bounded { domain } => Ok((domain.grid(h, (0.0, horizon), dt, 1)?, Some(domain.clone()))),
    }
}

/// Time-reversed coefficients `B(x, r) = A(x, pivot − r)`.
struct Reversed<'a> {
    inner: &'a dyn CoefficientSource,
    pivot: f64,
}

impl CoefficientSource for Reversed<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn components(&self) -> usize {
        self.inner.components()
    }
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.inner.eval_into(x, self.pivot - t, out)
    }
    fn is_time_independent(&self) -> bool {
        self.inner.is_time_independent()
    }
}

/// Shifts time by `s0`: `B(x, r) = A(x, s0 + r)`.
struct Shifted<'a> {
    inner: &'a dyn CoefficientSource,
    s0: f64,
}

impl CoefficientSource for Shifted<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn components(&self) -> usize {
        self.inner.components()
    }
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.inner.eval_into(x, self.s0 + t, out)
    }
    fn is_time_independent(&self) -> bool {
        self.inner.is_time_independent()
    }
}

fn run_probe(coef: &dyn CoefficientSource, eps: f64, pole: &[f64], horizon: f64, opts: &ProbeOptions) -> Result<ProbeRun> {
    let d = pole.len();
    if coef.components() != 1 || coef.dim() != d {
        return Err(invalid("the probe handles scalar equations with a pole of matching dimension"));
    }
    let h = opts.h.unwrap_or(1.0 / (16.0 / eps).ceil());
    let dt = opts.dt.unwrap_or_else(|| tiling_step(horizon, eps * eps / 16.0));
    check_resolution(eps, h, dt)?;
    let (grid, domain) = probe_grid(d, pole, horizon, opts, h, dt)?;
    let mapped;
    let coef: &dyn CoefficientSource = match &domain {
        Some(Domain::Graph { graph, d: 2, .. }) => {
            mapped = Mapped { inner: coef, psi: graph.psi.clone() };
            &mapped
        }
        _ => coef,
    };
    // nearest node to the pole, in reference coordinates
    let xi: Vec<f64> = match &domain {
        Some(Domain::Graph { graph, d: 2, .. }) => vec![pole[0], pole[1] - graph.psi.value(pole[0])],
        _ => pole.to_vec(),
    };
    let idx: Vec<usize> = (0..d)
        .map(|a| {
            let n = grid.nodes_per_axis()[a];
            (((xi[a] - grid.spec().lower[a]) / h).round().max(0.0) as usize).min(n - 1)
        })
        .collect();
    let pole_node = grid.node_index(&idx);
    if let Some(dom) = &domain {
        let dist = dom.node_distance(&grid, pole_node);
        if dist < 8.0 * h {
            return Err(Error::PoleTooCloseToBoundary { distance: dist, required: 8.0 * h });
        }
    }
    let mut u = vec![0.0; grid.n_nodes()];
    u[pole_node] = 1.0 / h.powi(d as i32);
    let mut marcher = Marcher::new(coef, &grid, 0.0, StepOptions::default())?;
    let steps = grid.steps();
    let stride = (steps / opts.fit_levels.max(1)).max(1);
    let mut levels = Vec::new();
    for l in 1..=steps {
        let t = grid.time(l);
        marcher.step(&mut u, t, None, None)?;
        if l > opts.skip_steps && (l % stride == 0 || l == steps) {
            levels.push((t, u.clone()));
        }
    }
    Ok(ProbeRun { grid, pole_node, levels })
}

/// Probes `Γ_ε(·, s + τ; y, s)` from a unit-mass nearest-node delta.
pub fn fundamental_probe(
    field: &CoefficientTensorField,
    eps: f64,
    pole: (&[f64], f64),
    horizon: f64,
    opts: &ProbeOptions,
) -> Result<FundamentalProbe> {
    let scaled = Scaled::new(field, eps);
    let shifted = Shifted { inner: &scaled, s0: pole.1 };
    let run = run_probe(&shifted, eps, pole.0, horizon, opts)?;
    let grid = &run.grid;
    let d = grid.dim();
    let domain = match &opts.domain {
        ProbeDomain::Bounded { domain } => Some(domain.clone()),
        ProbeDomain::Periodic { .. } => None,
    };
    let phys = |p: usize| domain.as_ref().map_or_else(|| grid.node_coords(p), |dm| dm.physical(&grid.node_coords(p)));
    let y = phys(run.pole_node);
    let xs: Vec<Vec<f64>> = (0..grid.n_nodes()).map(phys).collect();
    let interior: Vec<bool> = (0..grid.n_nodes())
        .map(|p| domain.as_ref().map_or(true, |dm| dm.node_distance(grid, p) >= 8.0 * grid.h()))
        .collect();
    let (mut sz, mut sy, mut szz, mut szy, mut syy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    let mut c_pointwise = 0.0f64;
    let mut mass = Vec::new();
    for (t, u) in &run.levels {
        let tau = *t;
        let peak = u.iter().fold(0.0f64, |a, v| a.max(*v));
        let m: f64 = (0..grid.n_nodes()).map(|p| grid.quadrature_weight(p) * u[p]).sum();
        mass.push((tau, m));
        for p in 0..grid.n_nodes() {
            if !interior[p] || u[p] <= 1e-10 * peak {
                continue;
            }
            let r2: f64 = xs[p].iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            c_pointwise = c_pointwise.max(u[p] * (r2.sqrt() + tau.sqrt()).powi(d as i32));
            let z = r2 / tau;
            if z > opts.z_max {
                continue;
            }
            let v = (u[p] * tau.powf(0.5 * d as f64)).ln();
            sz += z;
            sy += v;
            szz += z * z;
            szy += z * v;
            syy += v * v;
            n += 1;
        }
    }
    if n < 3 {
        return Err(invalid("too few envelope samples; lengthen the horizon or refine the grid"));
    }
    let nf = n as f64;
    let cov = szy - sz * sy / nf;
    let var = szz - sz * sz / nf;
    let slope = cov / var;
    let intercept = (sy - slope * sz) / nf;
    let vary = syy - sy * sy / nf;
    let r_squared = if vary > 0.0 { cov * cov / (var * vary) } else { 1.0 };
    let mass_drift = mass.iter().fold(0.0f64, |a, (_, m)| a.max((m - 1.0).abs()));
    let boundary_sigma = match &domain {
        None => None,
        Some(dm) => {
            let (_, last) = run.levels.last().expect("at least one level");
            let reach = dm.node_distance(grid, run.pole_node) * 0.25;
            let mut lx = Vec::new();
            let mut ly = Vec::new();
            for p in 0..grid.n_nodes() {
                let dist = dm.node_distance(grid, p);
                if dist >= 2.0 * grid.h() && dist <= reach && last[p] > 0.0 {
                    lx.push(dist.ln());
                    ly.push(last[p].ln());
                }
            }
            (lx.len() >= 3).then(|| fit_line(&lx, &ly).0)
        }
    };
    Ok(FundamentalProbe {
        eps,
        kappa: -slope,
        c: intercept.exp(),
        r_squared,
        n_samples: n,
        c_pointwise,
        mass,
        mass_drift: if domain.is_none() { mass_drift } else { f64::NAN },
        boundary_sigma,
    })
}

/// `Γ_ε(x, t; y, s)` against the adjoint `Γ*_ε(y, s; x, t)`, the latter
/// obtained by a forward solve of the time-reversed adjoint coefficients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdjointCheck {
    pub forward: f64,
    pub adjoint: f64,
    pub relative_gap: f64,
}

pub fn adjoint_symmetry(
    field: &CoefficientTensorField,
    eps: f64,
    x: &[f64],
    y: &[f64],
    s: f64,
    t: f64,
    opts: &ProbeOptions,
) -> Result<AdjointCheck> {
    if !(t > s) {
        return Err(invalid("observation time must follow the pole time"));
    }
    let horizon = t - s;
    let opts = ProbeOptions { skip_steps: 0, fit_levels: 1, ..opts.clone() };
    let scaled = Scaled::new(field, eps);
    let shifted = Shifted { inner: &scaled, s0: s };
    let fwd = run_probe(&shifted, eps, y, horizon, &opts)?;
    let adj_field = field.adjoint();
    let adj_scaled = Scaled::new(&adj_field, eps);
    // B(x, r) = A*(x, s + t − (s + r)) in probe-local time r
    let rev = Reversed { inner: &adj_scaled, pivot: t };
    let rev_shift = Shifted { inner: &rev, s0: s };
    let bwd = run_probe(&rev_shift, eps, x, horizon, &opts)?;
    let at = |run: &ProbeRun, pt: &[f64]| -> f64 {
        let g = &run.grid;
        let idx: Vec<usize> = (0..g.dim())
            .map(|a| (((pt[a] - g.spec().lower[a]) / g.h()).round().max(0.0) as usize).min(g.nodes_per_axis()[a] - 1))
            .collect();
        run.levels.last().expect("final level").1[g.node_index(&idx)]
    };
    let forward = at(&fwd, x);
    let adjoint = at(&bwd, y);
    let scale = forward.abs().max(adjoint.abs());
    Ok(AdjointCheck { forward, adjoint, relative_gap: if scale > 0.0 { (forward - adjoint).abs() / scale } else { 0.0 } })
}
