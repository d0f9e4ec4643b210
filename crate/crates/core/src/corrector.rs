//! Regularized correctors `χ_S`, effective tensors and the `b_S` field.
//!
//! `χ_{S,j}^{·β}` solves `∂_s χ − div(A∇χ) + S⁻²χ = div(A e_j e_β)` on a
//! periodic box. Time-independent fields are solved directly in the steady
//! limit; time-dependent fields are marched from zero data through a burn-in
//! period before an observation window is recorded.
//!
//! Component layout of `chi` is `[j][α][β]`, of gradients `[k][j][α][β]`,
//! of fluxes `[i][j][α][β]`.

use serde::Serialize;

use crate::apfield::{theta_hat, CoefTensor, CoefficientSource, CoefficientTensorField, SamplingPolicy};
use crate::error::{invalid, Error, Result};
use crate::mesh::{
    affine_forcing, build_grid, sample_coefficients, step_from_coefficients, window_nodes, BoundaryKind, FaceAveraging,
    GridSpec, NodeField, SpaceTimeGrid, StepOptions, Window,
};

/// How a corrector is discretized. `None` fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectorPolicy {
    /// Box side `L`; default `max(4S, 8·longest spatial period)`.
    pub box_side: Option<f64>,
    /// Box center (same on every axis).
    pub center: f64,
    /// Spatial step; default `min(shortest spatial period, 1)/16`, adjusted to tile `L`.
    pub h: Option<f64>,
    /// March step; default shortest temporal period / 16.
    pub dt: Option<f64>,
    /// Burn-in length; default `8 S² ln 10`.
    pub t_burn: Option<f64>,
    /// Observation window length; default `8 S²`.
    pub obs_len: Option<f64>,
    pub obs_start: f64,
    /// Spacing of stored levels; default shortest temporal period / 8.
    pub store_dt: Option<f64>,
    /// Cap on stored values of `χ` (levels × nodes × components).
    pub max_stored: usize,
    pub averaging: FaceAveraging,
    pub burn_in_tol: f64,
}

impl Default for CorrectorPolicy {
    fn default() -> Self {
        CorrectorPolicy {
            box_side: None,
            center: 0.0,
            h: None,
            dt: None,
            t_burn: None,
            obs_len: None,
            obs_start: 0.0,
            store_dt: None,
            max_stored: 4_000_000,
            averaging: FaceAveraging::Arithmetic,
            burn_in_tol: 1e-6,
        }
    }
}

/// Diagnostics of one corrector solve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectorDiagnostics {
    #[serde(rename = "S")]
    pub s: f64,
    pub sup_norm: f64,
    /// Largest interior-window mean of any entry after mean subtraction.
    pub mean: f64,
    /// Largest raw window mean that was subtracted.
    pub subtracted_mean: f64,
    /// `⟨|∇χ_S|²⟩` summed over all entries.
    pub energy: f64,
    /// `S⁻²⟨|χ_S|²⟩`.
    pub mass_term: f64,
    /// `⟨a∇χ_S·∇χ_S⟩ + S⁻²⟨|χ_S|²⟩`.
    pub identity_lhs: f64,
    /// `−⟨a_{ij}^{αβ} ∂_i χ_{S,j}^{αβ}⟩`.
    pub identity_rhs: f64,
    /// Both sides again with the operator's own face quadrature.
    pub scheme_identity: (f64, f64),
    pub residual: f64,
    pub burn_in_change: f64,
    pub box_side: f64,
    pub h: f64,
    pub dt: Option<f64>,
    pub t_burn: f64,
    pub obs_len: f64,
    pub steady: bool,
}

/// `χ_S` with its grid, averaging window and diagnostics.
#[derive(Clone, Debug)]
pub struct CorrectorSet {
    pub s: f64,
    pub field: CoefficientTensorField,
    pub grid: SpaceTimeGrid,
    pub chi: NodeField,
    pub window: Window,
    /// Window mean of the discrete flux `a + a∇χ_S`, accumulated at every step.
    pub mean_flux: CoefTensor,
    pub averaging: FaceAveraging,
    pub diagnostics: CorrectorDiagnostics,
}

fn resolved_h(field: &CoefficientTensorField, l: f64, h: Option<f64>) -> Result<f64> {
    let limit = field.shortest_spatial_period().map_or(f64::INFINITY, |p| p / 16.0);
    let h = match h {
        Some(h) => h,
        None => {
            let target = field.shortest_spatial_period().unwrap_or(1.0).min(1.0) / 16.0;
            l / (l / target).ceil()
        }
    };
    if h > limit * (1.0 + 1e-12) {
        return Err(Error::UnresolvedOscillation(format!(
            "h={h} gives fewer than 16 nodes per shortest period {}",
            limit * 16.0
        )));
    }
    Ok(h)
}

/// Geometry of a corrector solve: periodic box, step, interior window.
pub fn corrector_grid(field: &CoefficientTensorField, s: f64, policy: &CorrectorPolicy) -> Result<(SpaceTimeGrid, Window)> {
    if !(s >= 1.0) {
        return Err(invalid(format!("corrector scale S={s} must be at least 1")));
    }
    let default_l = (4.0 * s).max(8.0 * field.longest_spatial_period().unwrap_or(0.0));
    let l = policy.box_side.unwrap_or(default_l);
    if l < 4.0 * s * (1.0 - 1e-12) {
        return Err(invalid(format!("box side L={l} must be at least 4S={}", 4.0 * s)));
    }
    let h = resolved_h(field, l, policy.h)?;
    let lower = policy.center - 0.5 * l;
    let spec = GridSpec::cube(field.d, lower, lower + l, h, (policy.obs_start, policy.obs_start), 1.0, BoundaryKind::Periodic, field.m);
    let grid = build_grid(spec)?;
    let collar = 0.25 * s;
    let window = Window::spatial(vec![lower + collar; field.d], vec![lower + l - collar; field.d]);
    Ok((grid, window))
}

/// Samples a trig-polynomial field on fixed nodes at many times, reusing
/// the spatial phases `cos k·y`, `sin k·y`.
struct PhaseCache<'a> {
    field: &'a CoefficientTensorField,
    cos_ky: Vec<f64>,
    sin_ky: Vec<f64>,
    n_nodes: usize,
}

impl<'a> PhaseCache<'a> {
    fn new(field: &'a CoefficientTensorField, grid: &SpaceTimeGrid) -> Self {
        let na = field.atoms.len();
        let n_nodes = grid.n_nodes();
        let mut cos_ky = vec![0.0; n_nodes * na];
        let mut sin_ky = vec![0.0; n_nodes * na];
        for p in 0..n_nodes {
            let y = grid.node_coords(p);
            for (k, at) in field.atoms.iter().enumerate() {
                let ph: f64 = at.k.iter().zip(&y).map(|(a, b)| a * b).sum();
                cos_ky[p * na + k] = ph.cos();
                sin_ky[p * na + k] = ph.sin();
            }
        }
        PhaseCache { field, cos_ky, sin_ky, n_nodes }
    }

    fn sample(&self, t: f64, out: &mut Vec<f64>) {
        let nt = self.field.constant_term.data.len();
        let na = self.field.atoms.len();
        out.resize(self.n_nodes * nt, 0.0);
        let mut c = vec![0.0; na * nt];
        let mut s = vec![0.0; na * nt];
        for (k, at) in self.field.atoms.iter().enumerate() {
            for e in 0..nt {
                let th = at.lambda * t + at.phase[e];
                c[k * nt + e] = at.amplitude.data[e] * th.cos();
                s[k * nt + e] = at.amplitude.data[e] * th.sin();
            }
        }
        for p in 0..self.n_nodes {
            let o = &mut out[p * nt..(p + 1) * nt];
            o.copy_from_slice(&self.field.constant_term.data);
            for k in 0..na {
                let (ck, sk) = (self.cos_ky[p * na + k], self.sin_ky[p * na + k]);
                for e in 0..nt {
                    o[e] += ck * c[k * nt + e] - sk * s[k * nt + e];
                }
            }
        }
    }
}

/// Per-time-slice sums over the window nodes.
#[derive(Clone, Debug, Default)]
struct Accumulator {
    slices: usize,
    nodes: usize,
    flux: Vec<f64>,
    chi: Vec<f64>,
    chi_sq: f64,
    grad_sq: f64,
    energy: f64,
    rhs: f64,
    energy_scheme: f64,
    rhs_scheme: f64,
    sup: f64,
}

/// Node-centered differences of every entry at node `p`, written `[k][e]`.
fn node_gradient(grid: &SpaceTimeGrid, chi: &[f64], n_entries: usize, p: usize, out: &mut [f64]) {
    let h = grid.h();
    for k in 0..grid.dim() {
        let (Some(qp), Some(qm)) = (grid.neighbor(p, k, 1), grid.neighbor(p, k, -1)) else {
            out[k * n_entries..(k + 1) * n_entries].fill(0.0);
            continue;
        };
        for e in 0..n_entries {
            out[k * n_entries + e] = (chi[qp * n_entries + e] - chi[qm * n_entries + e]) / (2.0 * h);
        }
    }
}

/// Node-centered differences of every entry of `chi` (`[node][e]`), laid out `[node][k][e]`.
pub fn centered_gradient(grid: &SpaceTimeGrid, chi: &[f64], n_entries: usize) -> Vec<f64> {
    let w = grid.dim() * n_entries;
    let mut out = vec![0.0; grid.n_nodes() * w];
    for p in 0..grid.n_nodes() {
        node_gradient(grid, chi, n_entries, p, &mut out[p * w..(p + 1) * w]);
    }
    out
}

/// Flux entries `[i][j][α][β]` at node `p`; see [`discrete_flux`].
fn node_flux(coef_nodes: &[f64], grid: &SpaceTimeGrid, chi: &[f64], avg: FaceAveraging, p: usize, out: &mut [f64]) {
    let (d, m) = (grid.dim(), grid.m());
    let nt = d * d * m * m;
    let ne = d * m * m;
    let h = grid.h();
    let ci = |j: usize, a: usize, b: usize| (j * m + a) * m + b;
    let ai = |i: usize, k: usize, a: usize, g: usize| ((i * d + k) * m + a) * m + g;
    let cp = &coef_nodes[p * nt..(p + 1) * nt];
    for i in 0..d {
        let nb = [grid.neighbor(p, i, 1), grid.neighbor(p, i, -1)];
        for j in 0..d {
            for a in 0..m {
                for b in 0..m {
                    let mut v = 0.0;
                    let mut faces = 0.0;
                    for (side, q) in nb.iter().enumerate() {
                        let Some(q) = *q else { continue };
                        faces += 1.0;
                        for g in 0..m {
                            let e = ai(i, i, a, g);
                            let af = avg.combine(cp[e], coef_nodes[q * nt + e]);
                            let diff = (chi[q * ne + ci(j, g, b)] - chi[p * ne + ci(j, g, b)]) / h;
                            let grad = if side == 0 { diff } else { -diff };
                            let unit = if i == j && g == b { 1.0 } else { 0.0 };
                            v += af * (unit + grad);
                        }
                    }
                    if faces > 0.0 {
                        v /= faces;
                    }
                    for k in 0..d {
                        if k == i {
                            continue;
                        }
                        let (Some(qp), Some(qm)) = (grid.neighbor(p, k, 1), grid.neighbor(p, k, -1)) else { continue };
                        for g in 0..m {
                            let grad = (chi[qp * ne + ci(j, g, b)] - chi[qm * ne + ci(j, g, b)]) / (2.0 * h);
                            let unit = if k == j && g == b { 1.0 } else { 0.0 };
                            v += cp[ai(i, k, a, g)] * (unit + grad);
                        }
                    }
                    out[ai(i, j, a, b)] = v;
                }
            }
        }
    }
}

/// Discrete flux `a_{ij}^{αβ} + a_{ik}^{αγ} ∂_k χ_j^{γβ}` at every node, `[node][i][j][α][β]`.
///
/// The diagonal direction `k = i` averages the two face fluxes the operator
/// uses; other directions use nodal coefficients and centered differences.
pub fn discrete_flux(coef_nodes: &[f64], grid: &SpaceTimeGrid, chi: &[f64], avg: FaceAveraging) -> Vec<f64> {
    let nt = grid.dim() * grid.dim() * grid.m() * grid.m();
    let mut out = vec![0.0; grid.n_nodes() * nt];
    for p in 0..grid.n_nodes() {
        node_flux(coef_nodes, grid, chi, avg, p, &mut out[p * nt..(p + 1) * nt]);
    }
    out
}

impl Accumulator {
    fn new(d: usize, m: usize) -> Self {
        Accumulator { flux: vec![0.0; d * d * m * m], chi: vec![0.0; d * m * m], ..Default::default() }
    }

    fn add(&mut self, coef_nodes: &[f64], grid: &SpaceTimeGrid, chi: &[f64], nodes: &[usize], s: f64, avg: FaceAveraging) {
        let (d, m) = (grid.dim(), grid.m());
        let nt = d * d * m * m;
        let ne = d * m * m;
        let mut flux = vec![0.0; nt];
        let mut gp = vec![0.0; d * ne];
        let ai = |i: usize, k: usize, a: usize, g: usize| ((i * d + k) * m + a) * m + g;
        let ci = |j: usize, a: usize, b: usize| (j * m + a) * m + b;
        for &p in nodes {
            node_flux(coef_nodes, grid, chi, avg, p, &mut flux);
            node_gradient(grid, chi, ne, p, &mut gp);
            for e in 0..nt {
                self.flux[e] += flux[e];
            }
            let cp = &coef_nodes[p * nt..(p + 1) * nt];
            for e in 0..ne {
                let v = chi[p * ne + e];
                self.chi[e] += v;
                self.chi_sq += v * v;
                self.sup = self.sup.max(v.abs());
            }
            self.grad_sq += gp.iter().map(|v| v * v).sum::<f64>();
            // nodal quadrature measures the continuum identity; the scheme
            // quadrature (forward faces along the diagonal direction) is
            // what summation by parts makes exact on the whole box
            let fwd: Vec<Option<usize>> = (0..d).map(|i| grid.neighbor(p, i, 1)).collect();
            let dplus = |i: usize, e: usize| fwd[i].map_or(0.0, |q| (chi[q * ne + e] - chi[p * ne + e]) / grid.h());
            let face = |i: usize, e: usize| fwd[i].map_or(0.0, |q| avg.combine(cp[e], coef_nodes[q * nt + e]));
            for j in 0..d {
                for b in 0..m {
                    for i in 0..d {
                        for a in 0..m {
                            let di = gp[i * ne + ci(j, a, b)];
                            let fi = dplus(i, ci(j, a, b));
                            for k in 0..d {
                                for g in 0..m {
                                    let nodal = cp[ai(i, k, a, g)] * gp[k * ne + ci(j, g, b)] * di;
                                    self.energy += nodal;
                                    if k == i {
                                        self.energy_scheme += face(i, ai(i, i, a, g)) * dplus(i, ci(j, g, b)) * fi;
                                    } else {
                                        self.energy_scheme += nodal;
                                    }
                                }
                            }
                            self.rhs -= cp[ai(i, j, a, b)] * di;
                            if i == j {
                                self.rhs_scheme -= face(i, ai(i, i, a, b)) * fi;
                            } else {
                                self.rhs_scheme -= cp[ai(i, j, a, b)] * di;
                            }
                        }
                    }
                }
            }
        }
        let _ = s;
        self.slices += 1;
        self.nodes = nodes.len();
    }

    fn count(&self) -> f64 {
        (self.slices * self.nodes) as f64
    }
}

/// Solves for `χ_S` on the policy's periodic box.
pub fn solve_corrector(field: &CoefficientTensorField, s: f64, policy: &CorrectorPolicy) -> Result<CorrectorSet> {
    let (grid, window) = corrector_grid(field, s, policy)?;
    let nodes = window_nodes(&grid, &window)?;
    let (d, m) = (field.d, field.m);
    let ne = d * m * m;
    let mass = 1.0 / (s * s);
    let opts = StepOptions { averaging: policy.averaging, capacity: None };
    let t_burn_default = 8.0 * s * s * 10f64.ln();
    let obs_len = policy.obs_len.unwrap_or(8.0 * s * s);
    let mut acc = Accumulator::new(d, m);

    if field.is_time_independent() {
        let coef = sample_coefficients(field, &grid, policy.obs_start);
        let op = step_from_coefficients(&coef, &grid, mass, f64::INFINITY, &opts);
        let mut chi = vec![0.0; grid.n_nodes() * ne];
        let mut residual: f64 = 0.0;
        for j in 0..d {
            for b in 0..m {
                let rhs = affine_forcing(&coef, &grid, policy.averaging, j, b);
                let mut x = vec![0.0; grid.n_unknowns()];
                let st = op.solve(&rhs, &mut x)?;
                residual = residual.max(st.relative_residual);
                for p in 0..grid.n_nodes() {
                    for a in 0..m {
                        chi[p * ne + (j * m + a) * m + b] = x[p * m + a];
                    }
                }
            }
        }
        let sub = subtract_window_mean(&mut chi, &nodes, ne);
        acc.add(&coef, &grid, &chi, &nodes, s, policy.averaging);
        let chi_nf = NodeField::from_data(&grid.with_components(ne), vec![policy.obs_start], ne, chi)?;
        let diag = finish_diagnostics(&acc, s, sub, residual, 0.0, &grid, None, 0.0, 0.0, true);
        let mean_flux = CoefTensor { d, m, data: acc.flux.iter().map(|v| v / acc.count()).collect() };
        return Ok(CorrectorSet {
            s,
            field: field.clone(),
            grid,
            chi: chi_nf,
            window,
            mean_flux,
            averaging: policy.averaging,
            diagnostics: diag,
        });
    }

    // time-dependent: march through burn-in, then observe
    let period = field.shortest_temporal_period().expect("time-dependent field has a temporal period");
    let dt = policy.dt.unwrap_or(period / 16.0);
    if dt > period / 16.0 * (1.0 + 1e-12) {
        return Err(Error::UnresolvedOscillation(format!("dt={dt} exceeds shortest temporal period/16")));
    }
    let n_burn = (policy.t_burn.unwrap_or(t_burn_default) / dt).ceil() as usize;
    let t_burn = n_burn as f64 * dt;
    let n_obs = (obs_len / dt).round().max(1.0) as usize;
    let store_dt = policy.store_dt.unwrap_or(period / 8.0).max(dt);
    let stride = (store_dt / dt).round().max(1.0) as usize;
    let per_level = grid.n_nodes() * ne;
    let mut n_store = (n_obs / stride).max(1);
    let cap_levels = (policy.max_stored / per_level.max(1)).max(1);
    if n_store > cap_levels {
        n_store = cap_levels;
        let longest = field.longest_temporal_period().unwrap_or(period);
        let per_period = (longest / (stride as f64 * dt)).round() as usize;
        if per_period > 0 && per_period <= n_store && (longest / (stride as f64 * dt) - per_period as f64).abs() < 1e-9 {
            n_store -= n_store % per_period;
        }
    }
    let t_start = policy.obs_start - t_burn;
    let half = n_burn / 2;
    let mut chi = vec![0.0; per_level];
    let mut shadow = vec![0.0; per_level];
    let mut stored = Vec::with_capacity(n_store * per_level);
    let mut residual: f64 = 0.0;
    let mut burn_in_change = 0.0;
    let mut col = vec![0.0; grid.n_unknowns()];
    let mut rhs = vec![0.0; grid.n_unknowns()];
    let cache = PhaseCache::new(field, &grid);
    let mut coef = Vec::new();
    for step in 1..=(n_burn + n_obs) {
        let t = t_start + step as f64 * dt;
        cache.sample(t, &mut coef);
        let op = step_from_coefficients(&coef, &grid, mass, dt, &opts);
        let march_shadow = step > half && step <= n_burn;
        for j in 0..d {
            for b in 0..m {
                let force = affine_forcing(&coef, &grid, policy.averaging, j, b);
                for target in 0..(1 + march_shadow as usize) {
                    let src = if target == 0 { &mut chi } else { &mut shadow };
                    for p in 0..grid.n_nodes() {
                        for a in 0..m {
                            let k = p * m + a;
                            col[k] = src[p * ne + (j * m + a) * m + b];
                            rhs[k] = col[k] / dt + force[k];
                        }
                    }
                    let st = op.solve(&rhs, &mut col)?;
                    residual = residual.max(st.relative_residual);
                    for p in 0..grid.n_nodes() {
                        for a in 0..m {
                            src[p * ne + (j * m + a) * m + b] = col[p * m + a];
                        }
                    }
                }
            }
        }
        if step == n_burn {
            let num: f64 = chi.iter().zip(&shadow).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = chi.iter().map(|a| a * a).sum();
            burn_in_change = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
            if burn_in_change > policy.burn_in_tol {
                return Err(Error::BurnInNotConverged { change: burn_in_change, tolerance: policy.burn_in_tol });
            }
        }
        if step > n_burn {
            let k = step - n_burn - 1;
            // window covers steps whose time lies in [obs_start, obs_start + n_obs·dt)
            let t_obs = t - dt;
            let _ = t_obs;
            acc.add(&coef, &grid, &chi, &nodes, s, policy.averaging);
            if k % stride == 0 && k / stride < n_store {
                stored.extend_from_slice(&chi);
            }
        }
    }
    let times: Vec<f64> = (0..n_store).map(|k| policy.obs_start + dt + (k * stride) as f64 * dt).collect();
    let mut chi_levels = stored;
    let sub = subtract_levels_mean(&mut chi_levels, &nodes, ne, per_level, acc.chi.iter().map(|v| v / acc.count()).collect());
    // the online sums saw the raw field; shift them to the subtracted one
    let n = acc.count();
    for e in 0..ne {
        let mean = acc.chi[e] / n;
        acc.chi_sq -= n * mean * mean;
        acc.chi[e] = 0.0;
    }
    let store_grid = build_grid(GridSpec {
        t0: times[0],
        t1: times[0] + (n_store.saturating_sub(1) * stride) as f64 * dt,
        dt: stride as f64 * dt,
        m: ne,
        ..grid.spec().clone()
    })?;
    let chi_nf = NodeField::from_data(&store_grid, times, ne, chi_levels)?;
    let mean_flux = CoefTensor { d, m, data: acc.flux.iter().map(|v| v / acc.count()).collect() };
    let diag = finish_diagnostics(&acc, s, sub, residual, burn_in_change, &grid, Some(dt), t_burn, n_obs as f64 * dt, false);
    Ok(CorrectorSet {
        s,
        field: field.clone(),
        grid: store_grid.with_components(m),
        chi: chi_nf,
        window,
        mean_flux,
        averaging: policy.averaging,
        diagnostics: diag,
    })
}

fn subtract_window_mean(chi: &mut [f64], nodes: &[usize], ne: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for e in 0..ne {
        let mean = nodes.iter().map(|&p| chi[p * ne + e]).sum::<f64>() / nodes.len() as f64;
        worst = worst.max(mean.abs());
        for v in chi.iter_mut().skip(e).step_by(ne) {
            *v -= mean;
        }
    }
    worst
}

fn subtract_levels_mean(chi: &mut [f64], _nodes: &[usize], ne: usize, per_level: usize, means: Vec<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (e, mean) in means.iter().enumerate() {
        worst = worst.max(mean.abs());
        for lvl in chi.chunks_mut(per_level) {
            for v in lvl.iter_mut().skip(e).step_by(ne) {
                *v -= mean;
            }
        }
    }
    worst
}

#[allow(clippy::too_many_arguments)]
fn finish_diagnostics(
    acc: &Accumulator,
    s: f64,
    subtracted: f64,
    residual: f64,
    burn_in_change: f64,
    grid: &SpaceTimeGrid,
    dt: Option<f64>,
    t_burn: f64,
    obs_len: f64,
    steady: bool,
) -> CorrectorDiagnostics {
    let n = acc.count();
    let mass_term = acc.chi_sq / n / (s * s);
    CorrectorDiagnostics {
        s,
        sup_norm: acc.sup,
        mean: acc.chi.iter().map(|v| (v / n).abs()).fold(0.0, f64::max),
        subtracted_mean: subtracted,
        energy: acc.grad_sq / n,
        mass_term,
        identity_lhs: acc.energy / n + mass_term,
        identity_rhs: acc.rhs / n,
        scheme_identity: (acc.energy_scheme / n + mass_term, acc.rhs_scheme / n),
        residual,
        burn_in_change,
        box_side: grid.spec().upper[0] - grid.spec().lower[0],
        h: grid.h(),
        dt,
        t_burn,
        obs_len,
        steady,
    }
}

impl CorrectorSet {
    pub fn dim(&self) -> usize {
        self.field.d
    }

    pub fn components(&self) -> usize {
        self.field.m
    }

    pub fn n_entries(&self) -> usize {
        self.field.d * self.field.m * self.field.m
    }

    /// Spatial grid with `m` components per node (the operator's grid).
    pub fn operator_grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    /// `∇χ_S` by centered differences, components `[k][j][α][β]`.
    pub fn grad_chi(&self) -> NodeField {
        let ne = self.n_entries();
        let d = self.dim();
        let mut data = Vec::with_capacity(self.chi.data().len() * d);
        for l in 0..self.chi.n_levels() {
            data.extend(centered_gradient(&self.grid, self.chi.level(l), ne));
        }
        NodeField::from_data(&self.grid.with_components(d * ne), self.chi.times().to_vec(), d * ne, data)
            .expect("gradient shape follows chi")
    }

    /// Discrete flux `a + a∇χ_S` on every stored level, `[i][j][α][β]`.
    pub fn flux(&self) -> NodeField {
        let nt = self.dim() * self.dim() * self.components() * self.components();
        let mut data = Vec::with_capacity(self.grid.n_nodes() * nt * self.chi.n_levels());
        for l in 0..self.chi.n_levels() {
            let coef = sample_coefficients(&self.field, &self.grid, self.chi.times()[l]);
            data.extend(discrete_flux(&coef, &self.grid, self.chi.level(l), self.averaging));
        }
        NodeField::from_data(&self.grid.with_components(nt), self.chi.times().to_vec(), nt, data).expect("flux shape")
    }

    /// Window nodes of the interior averaging region.
    pub fn window_nodes(&self) -> Vec<usize> {
        window_nodes(&self.grid, &self.window).expect("window validated at solve time")
    }

    /// `χ_S` entry `e` at a spatial point and time, multilinear in space and
    /// linear between stored levels (held constant outside them).
    pub fn chi_at(&self, y: &[f64], s: f64, e: usize) -> f64 {
        interpolate(&self.chi, y, s, e)
    }
}

/// Multilinear interpolation of a periodic-box node field; time linear
/// between levels, clamped outside.
pub fn interpolate(field: &NodeField, y: &[f64], s: f64, comp: usize) -> f64 {
    let grid = field.grid();
    let d = grid.dim();
    let h = grid.h();
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0; d];
    for a in 0..d {
        let n = grid.nodes_per_axis()[a];
        let u = (y[a] - grid.spec().lower[a]) / h;
        let fl = u.floor();
        let i = if grid.is_periodic(a) { (fl as i64).rem_euclid(n as i64) as usize } else { (fl.max(0.0) as usize).min(n - 2) };
        base[a] = i;
        frac[a] = if grid.is_periodic(a) { u - fl } else { (u - i as f64).clamp(0.0, 1.0) };
    }
    let levels = field.times();
    let (l0, l1, w) = if levels.len() == 1 || s <= levels[0] {
        (0, 0, 0.0)
    } else if s >= levels[levels.len() - 1] {
        (levels.len() - 1, levels.len() - 1, 0.0)
    } else {
        let k = levels.partition_point(|&t| t <= s) - 1;
        (k, k + 1, (s - levels[k]) / (levels[k + 1] - levels[k]))
    };
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut wgt = 1.0;
        let mut idx = vec![0usize; d];
        for a in 0..d {
            let bit = (corner >> a) & 1;
            let n = grid.nodes_per_axis()[a];
            idx[a] = if grid.is_periodic(a) { (base[a] + bit) % n } else { (base[a] + bit).min(n - 1) };
            wgt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if wgt == 0.0 {
            continue;
        }
        let p = grid.node_index(&idx);
        let v = if w > 0.0 { (1.0 - w) * field.at(l0, p, comp) + w * field.at(l1, p, comp) } else { field.at(l0, p, comp) };
        acc += wgt * v;
    }
    acc
}

/// `Â_S` with its ellipticity check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectiveTensor {
    #[serde(rename = "S")]
    pub s: f64,
    pub a_hat: CoefTensor,
    pub min_form: f64,
    pub max_form: f64,
    pub elliptic: bool,
}

/// `Â_S = ⟨a⟩ + ⟨a∇χ_S⟩` as the window mean of the discrete flux.
pub fn effective_tensor(field: &CoefficientTensorField, cs: &CorrectorSet) -> Result<EffectiveTensor> {
    if field.d != cs.dim() || field.m != cs.components() {
        return Err(invalid("corrector was solved for a different field shape"));
    }
    window_nodes(&cs.grid, &cs.window)?;
    let a_hat = cs.mean_flux.clone();
    let (lo, hi) = a_hat.form_extremes();
    let tol = 1e-9;
    Ok(EffectiveTensor {
        s: cs.s,
        elliptic: lo >= field.mu * (1.0 - tol) && hi <= (1.0 + tol) / field.mu,
        min_form: lo,
        max_form: hi,
        a_hat,
    })
}

/// `|Â_S − Â_{2S}|` (entrywise max) from two solves on the box of `2S`.
pub fn effective_gap(field: &CoefficientTensorField, s: f64, policy: &CorrectorPolicy) -> Result<(EffectiveTensor, EffectiveTensor, f64)> {
    let family = solve_family(field, &[s, 2.0 * s], policy)?;
    let e1 = effective_tensor(field, &family[0])?;
    let e2 = effective_tensor(field, &family[1])?;
    let gap = e1.a_hat.max_abs_diff(&e2.a_hat);
    Ok((e1, e2, gap))
}

/// Solves several scales on one common box sized for the largest scale, so
/// that gradients can be compared node by node.
pub fn solve_family(field: &CoefficientTensorField, scales: &[f64], policy: &CorrectorPolicy) -> Result<Vec<CorrectorSet>> {
    let smax = scales.iter().cloned().fold(0.0, f64::max);
    let (grid, _) = corrector_grid(field, smax, policy)?;
    let l = grid.spec().upper[0] - grid.spec().lower[0];
    let common = CorrectorPolicy { box_side: Some(l), h: Some(grid.h()), ..policy.clone() };
    let mut out = Vec::with_capacity(scales.len());
    for &s in scales {
        let mut cs = solve_corrector(field, s, &common)?;
        // compare all scales on the window of the largest
        let collar = 0.25 * smax;
        let lower = grid.spec().lower[0];
        cs.window = Window::spatial(vec![lower + collar; field.d], vec![lower + l - collar; field.d]);
        out.push(cs);
    }
    Ok(out)
}

/// Relative mismatch of the energy identity
/// `⟨a∇χ·∇χ⟩ + S⁻²⟨|χ|²⟩ = −⟨a_{ij} ∂_i χ_j⟩` on window means.
pub fn energy_identity_residual(cs: &CorrectorSet) -> f64 {
    let l = cs.diagnostics.identity_lhs;
    let r = cs.diagnostics.identity_rhs;
    (l - r).abs() / (l.abs() + r.abs() + 1e-300)
}

/// The identity residual with the operator's face quadrature. On a box
/// whose window spans whole periods this is round-off; otherwise it measures
/// the window-boundary error alone.
pub fn scheme_identity_residual(cs: &CorrectorSet) -> f64 {
    let (l, r) = cs.diagnostics.scheme_identity;
    (l - r).abs() / (l.abs() + r.abs() + 1e-300)
}

/// Window mean of `|∇χ_a − ∇χ_b|` (Frobenius over entries) for two solves on a common grid.
pub fn gradient_gap(a: &CorrectorSet, b: &CorrectorSet, squared: bool) -> Result<f64> {
    if a.grid.spec() != b.grid.spec() || a.chi.n_levels() != b.chi.n_levels() {
        return Err(invalid("gradient gap needs correctors on a common grid"));
    }
    let ga = a.grad_chi();
    let gb = b.grad_chi();
    let nodes = window_nodes(&a.grid, &b.window)?;
    let nc = ga.n_comp();
    let mut acc = 0.0;
    for l in 0..ga.n_levels() {
        for &p in &nodes {
            let mut sq = 0.0;
            for c in 0..nc {
                sq += (ga.at(l, p, c) - gb.at(l, p, c)).powi(2);
            }
            acc += if squared { sq } else { sq.sqrt() };
        }
    }
    let mean = acc / (nodes.len() * ga.n_levels()) as f64;
    Ok(if squared { mean.sqrt() } else { mean })
}

/// Measured Cauchy gap between `S` and `2S` and its `Θ` bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CauchyGap {
    #[serde(rename = "S")]
    pub s: f64,
    /// `⟨|∇χ_S − ∇χ_{2S}|²⟩^{1/2}`.
    pub gap: f64,
    /// `Θ̂σ(S) + Θ̂σ(2S)`.
    pub theta_bound: f64,
    /// `gap / theta_bound` (zero when both vanish).
    pub fitted_c: f64,
}

pub fn cauchy_gap(
    field: &CoefficientTensorField,
    s: f64,
    sigma: f64,
    policy: &CorrectorPolicy,
    sampling: &SamplingPolicy,
) -> Result<CauchyGap> {
    let fam = solve_family(field, &[s, 2.0 * s], policy)?;
    let gap = gradient_gap(&fam[0], &fam[1], true)?;
    let theta_bound = theta_hat(field, s, sigma, sampling)?.value + theta_hat(field, 2.0 * s, sigma, sampling)?.value;
    let fitted_c = if theta_bound > 0.0 { gap / theta_bound } else { 0.0 };
    Ok(CauchyGap { s, gap, theta_bound, fitted_c })
}

/// `b_S` rows `i < d` (`a + a∇χ_S − Â_ref`) and row `d` (`−χ_S`), layout
/// `[(d+1)][d][α][β]`, with window means.
#[derive(Clone, Debug)]
pub struct BField {
    pub s: f64,
    pub values: NodeField,
    pub a_ref: CoefTensor,
    pub means: Vec<f64>,
}

impl BField {
    #[inline]
    pub fn index(d: usize, m: usize, i: usize, j: usize, a: usize, b: usize) -> usize {
        ((i * d + j) * m + a) * m + b
    }
}

/// Assembles `b_S` relative to a reference tensor, usually the effective
/// tensor of the largest affordable scale.
pub fn assemble_bs(cs: &CorrectorSet, a_ref: &CoefTensor) -> Result<BField> {
    let (d, m) = (cs.dim(), cs.components());
    let nt = d * d * m * m;
    let ne = d * m * m;
    let nb = (d + 1) * ne;
    let flux = cs.flux();
    let mut data = Vec::with_capacity(flux.n_levels() * cs.grid.n_nodes() * nb);
    for l in 0..flux.n_levels() {
        let fl = flux.level(l);
        let cl = cs.chi.level(l);
        for p in 0..cs.grid.n_nodes() {
            for e in 0..nt {
                data.push(fl[p * nt + e] - a_ref.data[e]);
            }
            for e in 0..ne {
                data.push(-cl[p * ne + e]);
            }
        }
    }
    let values = NodeField::from_data(&cs.grid.with_components(nb), flux.times().to_vec(), nb, data)?;
    let nodes = cs.window_nodes();
    let means = (0..nb)
        .map(|c| {
            let mut acc = 0.0;
            for l in 0..values.n_levels() {
                for &p in &nodes {
                    acc += values.at(l, p, c);
                }
            }
            acc / (nodes.len() * values.n_levels()) as f64
        })
        .collect();
    Ok(BField { s: cs.s, values, a_ref: a_ref.clone(), means })
}

/// Largest parabolic Hölder quotient of `χ_S` over window pairs within
/// `reach` cells and all stored levels.
pub fn chi_holder_quotient(cs: &CorrectorSet, sigma: f64, reach: usize) -> f64 {
    let nodes = cs.window_nodes();
    let grid = &cs.grid;
    let ne = cs.n_entries();
    let mut best: f64 = 0.0;
    for l in 0..cs.chi.n_levels() {
        for &p in &nodes {
            for axis in 0..grid.dim() {
                for off in 1..=reach as isize {
                    let Some(q) = grid.neighbor(p, axis, off) else { continue };
                    let dist = off as f64 * grid.h();
                    for e in 0..ne {
                        let v = (cs.chi.at(l, p, e) - cs.chi.at(l, q, e)).abs() / dist.powf(sigma);
                        best = best.max(v);
                    }
                }
            }
        }
    }
    best
}

/// `(⨏_{Q_r}|∇χ_S|^p)^{1/p}` maximized over cubes of side `2r` tiling the window.
pub fn gradient_lp(cs: &CorrectorSet, p: f64, r: f64) -> f64 {
    let grad = cs.grad_chi();
    let grid = &cs.grid;
    let nodes = cs.window_nodes();
    let nc = grad.n_comp();
    let lower = &cs.window.lower;
    let side = 2.0 * r;
    let mut sums: std::collections::BTreeMap<Vec<i64>, (f64, usize)> = Default::default();
    for l in 0..grad.n_levels() {
        for &q in &nodes {
            let x = grid.node_coords(q);
            let key: Vec<i64> = x.iter().zip(lower).map(|(a, b)| ((a - b) / side).floor() as i64).collect();
            let mag = (0..nc).map(|c| grad.at(l, q, c).powi(2)).sum::<f64>().sqrt();
            let e = sums.entry(key).or_insert((0.0, 0));
            e.0 += mag.powf(p);
            e.1 += 1;
        }
    }
    sums.values().map(|(s, n)| (s / *n as f64).powf(1.0 / p)).fold(0.0, f64::max)
}
