//! Parabolic mollifier `S_ε`, collar cutoffs `η₁ η₂` and `K_ε = S_ε(η₁η₂ ·)`.
//!
//! The kernel is `θ₁(y/ε) θ₂(s/ε²)` with polynomial bumps `(1 − |z|²)⁴`,
//! renormalized so that the discrete weights sum to one. Convolution is a
//! direct sum over the footprint, spatial and temporal factors applied in
//! turn. Values outside the grid count as zero. Norms in this module use
//! uniform cell weights, for which the discrete Young inequality is exact.

use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::mesh::{NodeField, SpaceTimeGrid};

/// Support of the temporal profile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalSupport {
    /// `θ₂` on `(−1, 1)`.
    #[default]
    TwoSided,
    /// `θ₂` on `(−1, 0)`.
    OneSided,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub temporal: TemporalSupport,
}

fn bump(z2: f64) -> f64 {
    if z2 < 1.0 {
        (1.0 - z2).powi(4)
    } else {
        0.0
    }
}

impl MollifierSpec {
    pub fn one_sided() -> Self {
        MollifierSpec { temporal: TemporalSupport::OneSided }
    }

    /// Unnormalized `θ₁` at `|z|²`.
    pub fn theta1(&self, z2: f64) -> f64 {
        bump(z2)
    }

    /// Unnormalized `θ₂`.
    pub fn theta2(&self, s: f64) -> f64 {
        match self.temporal {
            TemporalSupport::TwoSided => bump(s * s),
            TemporalSupport::OneSided => {
                if s > -1.0 && s < 0.0 {
                    bump((2.0 * s + 1.0).powi(2))
                } else {
                    0.0
                }
            }
        }
    }

    /// Normalized temporal weights at offsets `n·dt`.
    pub fn temporal_weights(&self, eps: f64, dt: f64) -> Result<Vec<(isize, f64)>> {
        let e2 = eps * eps;
        let r = (e2 / dt).ceil() as isize + 1;
        let mut w: Vec<(isize, f64)> =
            (-r..=r).map(|n| (n, self.theta2(n as f64 * dt / e2))).filter(|(_, v)| *v > 0.0).collect();
        let total: f64 = w.iter().map(|p| p.1).sum();
        if w.is_empty() || !(total > 0.0) {
            return Err(Error::KernelUnresolved(format!("dt={dt} leaves no node inside the temporal support eps²={e2}")));
        }
        w.iter_mut().for_each(|p| p.1 /= total);
        Ok(w)
    }
}

/// Normalized spatial weights at integer offsets with `|k h| < ε`.
pub fn spatial_weights(spec: &MollifierSpec, d: usize, h: f64, eps: f64) -> Vec<(Vec<isize>, f64)> {
    let r = (eps / h).ceil() as isize;
    let side = (2 * r + 1) as usize;
    let mut out = Vec::new();
    for flat in 0..side.pow(d as u32) {
        let mut k = vec![0isize; d];
        let mut rest = flat;
        for v in k.iter_mut().rev() {
            *v = (rest % side) as isize - r;
            rest /= side;
        }
        let z2: f64 = k.iter().map(|&v| (v as f64 * h / eps).powi(2)).sum();
        let w = spec.theta1(z2);
        if w > 0.0 {
            out.push((k, w));
        }
    }
    let total: f64 = out.iter().map(|p| p.1).sum();
    out.iter_mut().for_each(|p| p.1 /= total);
    out
}

fn check_resolution(grid: &SpaceTimeGrid, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::KernelUnresolved(format!("eps={eps} must be positive")));
    }
    if grid.h() > eps / 4.0 * (1.0 + 1e-12) {
        return Err(Error::KernelUnresolved(format!("h={} exceeds eps/4={}", grid.h(), eps / 4.0)));
    }
    Ok(())
}

/// Spatial convolution of one level with zero extension (periodic axes wrap).
pub(crate) fn convolve_space(grid: &SpaceTimeGrid, level: &[f64], n_comp: usize, weights: &[(Vec<isize>, f64)]) -> Vec<f64> {
    let d = grid.dim();
    let nn = grid.n_nodes();
    let nodes = grid.nodes_per_axis().to_vec();
    let mut out = vec![0.0; level.len()];
    let mut idx = vec![0usize; d];
    for p in 0..nn {
        let base = grid.multi_index(p);
        let o = &mut out[p * n_comp..(p + 1) * n_comp];
        'offsets: for (k, w) in weights {
            for a in 0..d {
                let j = base[a] as isize - k[a];
                let n = nodes[a] as isize;
                idx[a] = if grid.is_periodic(a) {
                    j.rem_euclid(n) as usize
                } else if j < 0 || j >= n {
                    continue 'offsets;
                } else {
                    j as usize
                };
            }
            let q = grid.node_index(&idx);
            for c in 0..n_comp {
                o[c] += w * level[q * n_comp + c];
            }
        }
    }
    out
}

fn uniform_step(times: &[f64]) -> Result<f64> {
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt {
            return Err(Error::KernelUnresolved("time levels are not uniformly spaced".into()));
        }
    }
    Ok(dt)
}

/// `S_ε f` on the nodes and levels of `f`.
///
/// A single-level field is smoothed in space only. Several levels must be
/// uniformly spaced with `dt ≤ ε²/4`, so that the temporal kernel is resolved
/// like the spatial one.
pub fn smooth(f: &NodeField, eps: f64, spec: &MollifierSpec) -> Result<NodeField> {
    let grid = f.grid();
    check_resolution(grid, eps)?;
    let sw = spatial_weights(spec, grid.dim(), grid.h(), eps);
    let nc = f.n_comp();
    let nl = f.n_levels();
    let len = f.level_len();
    let mut tmp = vec![0.0; f.data().len()];
    if nl == 1 {
        tmp.copy_from_slice(f.data());
    } else {
        let dt = uniform_step(f.times())?;
        if dt > eps * eps / 4.0 * (1.0 + 1e-12) {
            return Err(Error::KernelUnresolved(format!("dt={dt} exceeds eps²/4={}", eps * eps / 4.0)));
        }
        let tw = spec.temporal_weights(eps, dt)?;
        for l in 0..nl {
            let dst = &mut tmp[l * len..(l + 1) * len];
            for &(n, w) in &tw {
                let src = l as isize - n;
                if src < 0 || src >= nl as isize {
                    continue;
                }
                for (a, b) in dst.iter_mut().zip(f.level(src as usize)) {
                    *a += w * b;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(tmp.len());
    for l in 0..nl {
        data.extend(convolve_space(grid, &tmp[l * len..(l + 1) * len], nc, &sw));
    }
    NodeField::from_data(grid, f.times().to_vec(), nc, data)
}

/// `S_ε` of a time-continuous source at one time `t`. The source fills a
/// level at any requested time (it supplies its own zero extension); the
/// temporal integral uses nodes spaced `ε²/16`.
pub fn smooth_at(
    grid: &SpaceTimeGrid,
    n_comp: usize,
    eps: f64,
    spec: &MollifierSpec,
    t: f64,
    source: &dyn Fn(f64, &mut [f64]),
) -> Result<Vec<f64>> {
    check_resolution(grid, eps)?;
    let sw = spatial_weights(spec, grid.dim(), grid.h(), eps);
    let tau = eps * eps / 16.0;
    let tw = spec.temporal_weights(eps, tau)?;
    let len = grid.n_nodes() * n_comp;
    let mut acc = vec![0.0; len];
    let mut buf = vec![0.0; len];
    for &(n, w) in &tw {
        buf.iter_mut().for_each(|v| *v = 0.0);
        source(t - n as f64 * tau, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += w * b;
        }
    }
    Ok(convolve_space(grid, &acc, n_comp, &sw))
}

/// Smooth step: 0 for `u ≤ 0`, 1 for `u ≥ 1`, slope at most 15/8.
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Collar width, domain and time interval of the cutoffs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub delta: f64,
    pub domain: Domain,
    pub t0: f64,
    pub t1: f64,
}

impl CutoffSpec {
    /// `η₁` at a physical point: 0 within `δ` of `∂Ω`, 1 beyond `2δ`.
    pub fn eta1(&self, x: &[f64]) -> f64 {
        smoothstep((self.domain.distance_to_boundary(x) - self.delta) / self.delta)
    }

    /// `η₂`: 1 on `[t0 + 2δ², t1 − 2δ²]`, 0 outside `[t0 + δ², t1 − δ²]`.
    pub fn eta2(&self, t: f64) -> f64 {
        let d2 = self.delta * self.delta;
        smoothstep((t - self.t0 - d2) / d2) * smoothstep((self.t1 - d2 - t) / d2)
    }

    /// `η₁` on every node of a grid over the domain's reference box.
    pub fn eta1_nodes(&self, grid: &SpaceTimeGrid) -> Vec<f64> {
        (0..grid.n_nodes()).map(|p| self.eta1(&self.domain.physical(&grid.node_coords(p)))).collect()
    }

    /// Discrete gradient constants `(δ max|D η₁|, δ² max|D η₂|)` on a grid.
    pub fn gradient_constants(&self, grid: &SpaceTimeGrid) -> (f64, f64) {
        let e1 = self.eta1_nodes(grid);
        let mut c1 = 0.0f64;
        for p in 0..grid.n_nodes() {
            for a in 0..grid.dim() {
                if let Some(q) = grid.neighbor(p, a, 1) {
                    let dist = {
                        let xp = self.domain.physical(&grid.node_coords(p));
                        let xq = self.domain.physical(&grid.node_coords(q));
                        xp.iter().zip(&xq).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
                    };
                    c1 = c1.max((e1[q] - e1[p]).abs() / dist * self.delta);
                }
            }
        }
        let n = 4096;
        let dt = (self.t1 - self.t0) / n as f64;
        let mut c2 = 0.0f64;
        for i in 0..n {
            let t = self.t0 + i as f64 * dt;
            c2 = c2.max((self.eta2(t + dt) - self.eta2(t)).abs() / dt * self.delta * self.delta);
        }
        (c1, c2)
    }
}

/// `K_ε f = S_ε(η₁ η₂ f)` on the grid and levels of `f`.
pub fn k_eps(f: &NodeField, eps: f64, cutoff: &CutoffSpec, spec: &MollifierSpec) -> Result<NodeField> {
    if !(cutoff.delta > eps) {
        return Err(Error::CollarTooThin { delta: cutoff.delta, eps });
    }
    let grid = f.grid();
    let e1 = cutoff.eta1_nodes(grid);
    let nc = f.n_comp();
    let mut g = f.clone();
    for l in 0..f.n_levels() {
        let e2 = cutoff.eta2(f.times()[l]);
        for (p, &w) in e1.iter().enumerate() {
            for c in 0..nc {
                g.set(l, p, c, f.at(l, p, c) * w * e2);
            }
        }
    }
    smooth(&g, eps, spec)
}

/// Uniform-weight `L^p` norm over all levels: cell weight `h^d` per node,
/// times the level spacing when there are several levels.
pub fn lp_norm(f: &NodeField, p: f64) -> f64 {
    let g = f.grid();
    let mut w = g.h().powi(g.dim() as i32);
    if f.n_levels() > 1 {
        w *= (f.times()[f.n_levels() - 1] - f.times()[0]) / (f.n_levels() - 1) as f64;
    }
    let s: f64 = f.data().iter().map(|v| v.abs().powf(p)).sum();
    (w * s).powf(1.0 / p)
}

/// Centered-difference gradient magnitude field `|∇f|` (one-sided at faces).
fn grad_norm_field(f: &NodeField) -> NodeField {
    let g = f.grid();
    let h = g.h();
    let nc = f.n_comp();
    let mut out = NodeField::zeros(g, f.times().to_vec(), 1);
    for l in 0..f.n_levels() {
        for p in 0..g.n_nodes() {
            let mut sq = 0.0;
            for a in 0..g.dim() {
                for c in 0..nc {
                    sq += fd(f, l, p, a, c, h).powi(2);
                }
            }
            out.set(l, p, 0, sq.sqrt());
        }
    }
    out
}

fn fd(f: &NodeField, l: usize, p: usize, a: usize, c: usize, h: f64) -> f64 {
    let g = f.grid();
    match (g.neighbor(p, a, 1), g.neighbor(p, a, -1)) {
        (Some(q), Some(r)) => (f.at(l, q, c) - f.at(l, r, c)) / (2.0 * h),
        (Some(q), None) => (f.at(l, q, c) - f.at(l, p, c)) / h,
        (None, Some(r)) => (f.at(l, p, c) - f.at(l, r, c)) / h,
        (None, None) => 0.0,
    }
}

/// Both sides of the weighted bound `‖g^ε S_ε f‖_p ≤ C sup(⨏_{Q₁}|g|^p)^{1/p} ‖f‖_p`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightedBound {
    pub eps: f64,
    pub p: f64,
    pub lhs: f64,
    /// `sup (⨏_{Q₁}|g|^p)^{1/p}` over sampled unit cylinders.
    pub g_average: f64,
    pub f_norm: f64,
    pub ratio: f64,
    /// `‖g^ε ∇S_ε f‖_p / (g_average ‖f‖_p)`, which grows like `ε⁻¹`.
    pub grad_ratio: f64,
}

/// Evaluates both sides of the weighted bound for `g(y, s)` sampled at
/// `(x/ε, t/ε²)`.
pub fn weighted_bound_check(
    g: &dyn Fn(&[f64], f64) -> f64,
    f: &NodeField,
    eps: f64,
    p: f64,
    spec: &MollifierSpec,
) -> Result<WeightedBound> {
    if p != 2.0 && p != 4.0 {
        return Err(crate::error::invalid(format!("weighted bound supports p in {{2, 4}}, got {p}")));
    }
    let sf = smooth(f, eps, spec)?;
    let grid = f.grid();
    let d = grid.dim();
    let mut weighted = sf.clone();
    let mut weighted_grad = grad_norm_field(&sf);
    for l in 0..sf.n_levels() {
        let t = sf.times()[l];
        for q in 0..grid.n_nodes() {
            let y: Vec<f64> = grid.node_coords(q).iter().map(|x| x / eps).collect();
            let gv = g(&y, t / (eps * eps));
            for c in 0..sf.n_comp() {
                weighted.set(l, q, c, sf.at(l, q, c) * gv);
            }
            weighted_grad.set(l, q, 0, weighted_grad.at(l, q, 0) * gv.abs());
        }
    }
    let g_average = unit_cylinder_sup(g, d, p);
    let f_norm = lp_norm(f, p);
    let lhs = lp_norm(&weighted, p);
    let denom = g_average * f_norm;
    Ok(WeightedBound {
        eps,
        p,
        lhs,
        g_average,
        f_norm,
        ratio: if denom > 0.0 { lhs / denom } else { 0.0 },
        grad_ratio: if denom > 0.0 { lp_norm(&weighted_grad, p) / denom } else { 0.0 },
    })
}

/// `sup (⨏_{Q₁(y,s)}|g|^p)^{1/p}` over cylinder centers on `[0,4]^d × [0,4]`,
/// each average by a 32-point rule per unit length.
fn unit_cylinder_sup(g: &dyn Fn(&[f64], f64) -> f64, d: usize, p: f64) -> f64 {
    let n = 64usize; // points across the ball diameter 2
    let nt = 32usize;
    let centers = 5usize;
    let mut best = 0.0f64;
    let mut y = vec![0.0; d];
    for cf in 0..centers.pow(d as u32 + 1) {
        let mut rest = cf;
        let mut c = vec![0.0; d + 1];
        for v in c.iter_mut() {
            *v = (rest % centers) as f64 * 0.8;
            rest /= centers;
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for flat in 0..n.pow(d as u32) {
            let mut rest = flat;
            let mut r2 = 0.0;
            for (a, ya) in y.iter_mut().enumerate() {
                let off = -1.0 + (2.0 * (rest % n) as f64 + 1.0) / n as f64;
                rest /= n;
                *ya = c[a] + off;
                r2 += off * off;
            }
            if r2 >= 1.0 {
                continue;
            }
            for k in 0..nt {
                let s = c[d] - (k as f64 + 0.5) / nt as f64;
                acc += g(&y, s).abs().powf(p);
                count += 1;
            }
        }
        best = best.max((acc / count as f64).powf(1.0 / p));
    }
    best
}

/// Measured smoothing constants and their Young-inequality bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothingConstants {
    pub eps: f64,
    /// `(ε‖∇S_ε f‖ + ε²‖∇²S_ε f‖)/‖f‖`.
    pub spatial: f64,
    /// `ε²‖∂_t S_ε f‖/‖f‖` (zero for single-level fields).
    pub temporal: f64,
    /// `ε Σ|D w| + ε² Σ|D² w|` of the discrete kernel.
    pub spatial_bound: f64,
    /// `ε² Σ|D_t w|` of the discrete temporal kernel.
    pub temporal_bound: f64,
}

/// Measures the derivative bounds of `S_ε` on a scalar field in one space
/// dimension, with the discrete constants the Young inequality guarantees.
pub fn smoothing_constants(f: &NodeField, eps: f64, spec: &MollifierSpec) -> Result<SmoothingConstants> {
    let grid = f.grid();
    if grid.dim() != 1 || f.n_comp() != 1 {
        return Err(crate::error::invalid("smoothing constants are measured on scalar fields in d = 1"));
    }
    let sf = smooth(f, eps, spec)?;
    let h = grid.h();
    let n = grid.n_nodes();
    let nl = sf.n_levels();
    let fnorm = lp_norm(f, 2.0);
    let periodic = grid.is_periodic(0);
    let at = |l: usize, i: isize| -> f64 {
        if periodic {
            sf.at(l, i.rem_euclid(n as isize) as usize, 0)
        } else if i < 0 || i >= n as isize {
            0.0
        } else {
            sf.at(l, i as usize, 0)
        }
    };
    let cell = h * if nl > 1 { (f.times()[nl - 1] - f.times()[0]) / (nl - 1) as f64 } else { 1.0 };
    let (mut g1, mut g2, mut gt) = (0.0, 0.0, 0.0);
    // differences whose stencil stays on the grid, so each one is a
    // convolution of f with a difference of the kernel
    let (lo1, hi1, lo2, hi2) = if periodic { (0, n as isize, 0, n as isize) } else { (0, n as isize - 1, 1, n as isize - 1) };
    for l in 0..nl {
        for i in lo1..hi1 {
            g1 += (at(l, i + 1) - at(l, i)).powi(2) / (h * h);
        }
        for i in lo2..hi2 {
            g2 += (at(l, i + 1) - 2.0 * at(l, i) + at(l, i - 1)).powi(2) / h.powi(4);
        }
    }
    if nl > 1 {
        let dt = (f.times()[nl - 1] - f.times()[0]) / (nl - 1) as f64;
        for l in 0..nl - 1 {
            for i in 0..n {
                gt += (sf.at(l + 1, i, 0) - sf.at(l, i, 0)).powi(2) / (dt * dt);
            }
        }
    }
    let norm = |v: f64| (cell * v).sqrt();
    let spatial = (eps * norm(g1) + eps * eps * norm(g2)) / fnorm;
    let temporal = eps * eps * norm(gt) / fnorm;
    let sw = spatial_weights(spec, 1, h, eps);
    let r = sw.iter().map(|(k, _)| k[0].abs()).max().unwrap_or(0) + 1;
    let wv = |k: isize| sw.iter().find(|(o, _)| o[0] == k).map_or(0.0, |p| p.1);
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for k in -r..=r {
        d1 += (wv(k + 1) - wv(k)).abs() / h;
        d2 += (wv(k + 1) - 2.0 * wv(k) + wv(k - 1)).abs() / (h * h);
    }
    let temporal_bound = if nl > 1 {
        let dt = (f.times()[nl - 1] - f.times()[0]) / (nl - 1) as f64;
        let tw = spec.temporal_weights(eps, dt)?;
        let lo = tw.iter().map(|p| p.0).min().unwrap() - 1;
        let hi = tw.iter().map(|p| p.0).max().unwrap() + 1;
        let tv = |k: isize| tw.iter().find(|(o, _)| *o == k).map_or(0.0, |p| p.1);
        eps * eps * (lo..=hi).map(|k| (tv(k + 1) - tv(k)).abs() / dt).sum::<f64>()
    } else {
        0.0
    };
    Ok(SmoothingConstants { eps, spatial, temporal, spatial_bound: eps * d1 + eps * eps * d2, temporal_bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_grid, BoundaryKind, GridSpec};

    #[test]
    fn weights_have_unit_mass() {
        for eps in [0.05, 0.1, 0.3] {
            for d in [1, 2] {
                let w = spatial_weights(&MollifierSpec::default(), d, eps / 5.3, eps);
                assert!((w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(w.iter().all(|p| p.1 >= 0.0));
            }
            for spec in [MollifierSpec::default(), MollifierSpec::one_sided()] {
                let t = spec.temporal_weights(eps, eps * eps / 7.0).unwrap();
                assert!((t.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_sided_weights_look_ahead() {
        let t = MollifierSpec::one_sided().temporal_weights(0.1, 0.001).unwrap();
        assert!(t.iter().all(|p| p.0 < 0));
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let g = build_grid(GridSpec::cube(1, 0.0, 1.0, 0.1, (0.0, 0.0), 1.0, BoundaryKind::Dirichlet, 1)).unwrap();
        let f = NodeField::zeros(&g, vec![0.0], 1);
        assert!(matches!(smooth(&f, 0.2, &MollifierSpec::default()), Err(Error::KernelUnresolved(_))));
    }

    #[test]
    fn smoothstep_profile() {
        assert_eq!(smoothstep(-1.0), 0.0);
        assert_eq!(smoothstep(1.5), 1.0);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
    }
}
