//! Flux potentials `f_S`, their divergence `F_S` and the skew-symmetric flux
//! correctors `φ_S`.
//!
//! `f_{S,ij}` solves `−Δ f + S⁻² f = ⟨b_{S,ij}⟩ − b_{S,ij}` entrywise on the
//! periodized space-time box, with time as an extra coordinate wrapped over
//! the stored observation window. Time-independent correctors give
//! time-independent potentials and the time coordinate drops out.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::corrector::{BField, CorrectorSet};
use crate::error::{invalid, Error, Result};
use crate::mesh::{window_nodes, NodeField};

/// `f_S` entries `[(d+1)][d][α][β]` on the corrector's stored levels.
#[derive(Clone, Debug)]
pub struct FluxPotential {
    pub s: f64,
    pub f: NodeField,
    /// Spacing of the periodic time coordinate; `None` when `f` is time-independent.
    pub time_step: Option<f64>,
    pub residual: f64,
    pub d: usize,
    pub m: usize,
}

/// Space-time shape helpers for a node field whose levels form a periodic axis.
struct Layout {
    /// Outermost first: `[levels?, n_0, …, n_{d-1}]`.
    shape: Vec<usize>,
    spacing: Vec<f64>,
    has_time: bool,
}

impl Layout {
    fn of(field: &NodeField, time_step: Option<f64>) -> Layout {
        let g = field.grid();
        let mut shape = Vec::new();
        let mut spacing = Vec::new();
        if let Some(dt) = time_step {
            shape.push(field.n_levels());
            spacing.push(dt);
        }
        shape.extend_from_slice(g.nodes_per_axis());
        spacing.extend(std::iter::repeat(g.h()).take(g.dim()));
        Layout { shape, spacing, has_time: time_step.is_some() }
    }

    fn len(&self) -> usize {
        self.shape.iter().product()
    }

    fn stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    /// Layout axis of coordinate `k` (`0..d` spatial, `d` time).
    fn axis_of(&self, k: usize, d: usize) -> Option<usize> {
        if k == d {
            self.has_time.then_some(0)
        } else {
            Some(k + self.has_time as usize)
        }
    }

    fn neighbor(&self, idx: usize, axis: usize, off: isize) -> usize {
        let n = self.shape[axis] as isize;
        let st = self.stride(axis);
        let i = ((idx / st) % self.shape[axis]) as isize;
        let j = (i + off).rem_euclid(n);
        (idx as isize + (j - i) * st as isize) as usize
    }

    /// Centered difference along coordinate `k` of a scalar array.
    fn diff(&self, v: &[f64], k: usize, d: usize) -> Vec<f64> {
        let Some(ax) = self.axis_of(k, d) else { return vec![0.0; v.len()] };
        let h = self.spacing[ax];
        (0..v.len())
            .map(|p| (v[self.neighbor(p, ax, 1)] - v[self.neighbor(p, ax, -1)]) / (2.0 * h))
            .collect()
    }

    /// Narrow-stencil `−Δ v`.
    fn neg_laplacian(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for ax in 0..self.shape.len() {
            let h2 = self.spacing[ax] * self.spacing[ax];
            for (p, o) in out.iter_mut().enumerate() {
                *o += (2.0 * v[p] - v[self.neighbor(p, ax, 1)] - v[self.neighbor(p, ax, -1)]) / h2;
            }
        }
        out
    }
}

fn component(field: &NodeField, c: usize) -> Vec<f64> {
    field.data().iter().skip(c).step_by(field.n_comp()).copied().collect()
}

fn fft_axes(buf: &mut [Complex<f64>], layout: &Layout, planner: &mut FftPlanner<f64>, inverse: bool) {
    for ax in 0..layout.shape.len() {
        let n = layout.shape[ax];
        if n < 2 {
            continue;
        }
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let st = layout.stride(ax);
        let outer = layout.len() / (n * st);
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for o in 0..outer {
            for inner in 0..st {
                let base = o * n * st + inner;
                for (i, l) in line.iter_mut().enumerate() {
                    *l = buf[base + i * st];
                }
                fft.process(&mut line);
                for (i, l) in line.iter().enumerate() {
                    buf[base + i * st] = *l;
                }
            }
        }
    }
}

/// Solves `−Δ f + S⁻² f = g` with the narrow periodic stencil by FFT.
fn massive_poisson(g: &[f64], layout: &Layout, mass: f64, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = g.iter().map(|v| Complex::new(*v, 0.0)).collect();
    fft_axes(&mut buf, layout, planner, false);
    let eig: Vec<Vec<f64>> = layout
        .shape
        .iter()
        .zip(&layout.spacing)
        .map(|(&n, &h)| (0..n).map(|k| (2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()) / (h * h)).collect())
        .collect();
    for (idx, v) in buf.iter_mut().enumerate() {
        let mut lam = mass;
        for ax in 0..layout.shape.len() {
            lam += eig[ax][(idx / layout.stride(ax)) % layout.shape[ax]];
        }
        *v /= lam;
    }
    fft_axes(&mut buf, layout, planner, true);
    let norm = layout.len() as f64;
    buf.iter().map(|c| c.re / norm).collect()
}

/// Solves for `f_S` with datum `h = ⟨b_S⟩ − b_S`.
pub fn solve_flux_potential(b: &BField, cs: &CorrectorSet) -> Result<FluxPotential> {
    let (d, m) = (cs.dim(), cs.components());
    let nb = (d + 1) * d * m * m;
    if b.values.n_comp() != nb || b.values.n_levels() != cs.chi.n_levels() {
        return Err(invalid("b field does not belong to this corrector"));
    }
    let time_step = if cs.diagnostics.steady || b.values.n_levels() < 2 {
        None
    } else {
        Some(b.values.times()[1] - b.values.times()[0])
    };
    let layout = Layout::of(&b.values, time_step);
    let levels = if time_step.is_some() { b.values.n_levels() } else { 1 };
    let per = cs.grid.n_nodes() * levels;
    let mass = 1.0 / (cs.s * cs.s);
    let mut planner = FftPlanner::new();
    let mut out = vec![0.0; per * nb];
    let mut worst = 0.0f64;
    for c in 0..nb {
        let raw = component(&b.values, c);
        let g: Vec<f64> = raw[..per].iter().map(|v| b.means[c] - v).collect();
        let mean = g.iter().sum::<f64>() / per as f64;
        let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if mean.abs() > 1e-3 * scale.max(1.0) {
            return Err(Error::MeanNotZero { mean, limit: 1e-3 });
        }
        let f = massive_poisson(&g, &layout, mass, &mut planner);
        let lap = layout.neg_laplacian(&f);
        let num: f64 = lap.iter().zip(&f).zip(&g).map(|((l, fv), gv)| (l + mass * fv - gv).powi(2)).sum();
        let den: f64 = g.iter().map(|v| v * v).sum();
        if den > 0.0 {
            worst = worst.max((num / den).sqrt());
        }
        for (p, v) in f.iter().enumerate() {
            out[p * nb + c] = *v;
        }
    }
    if worst > 1e-8 {
        return Err(Error::SolverDivergence { iterations: 0, residual: worst });
    }
    let times = b.values.times()[..levels].to_vec();
    let f = NodeField::from_data(b.values.grid(), times, nb, out)?;
    Ok(FluxPotential { s: cs.s, f, time_step, residual: worst, d, m })
}

/// `φ_{S,kij}` for `k < i` over `0..=d` and `F_{S,j} = Σ_k ∂_k f_{S,kj}`.
#[derive(Clone, Debug)]
pub struct FluxSet {
    pub s: f64,
    pub d: usize,
    pub m: usize,
    /// Components `[pair][j][α][β]`, pairs `(k, i)` with `k < i` in [`FluxSet::pairs`] order.
    pub phi: NodeField,
    /// Components `[j][α][β]`.
    pub big_f: NodeField,
    pub time_step: Option<f64>,
}

impl FluxSet {
    /// Index pairs `(k, i)`, `k < i ≤ d`, in storage order.
    pub fn pairs(d: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..=d {
            for k in 0..i {
                out.push((k, i));
            }
        }
        out
    }

    /// `φ_{kij}^{αβ}` at a level and node, read from the stored half with
    /// `φ_{kij} = −φ_{ikj}`; zero on the diagonal.
    pub fn phi_at(&self, l: usize, node: usize, k: usize, i: usize, j: usize, a: usize, b: usize) -> f64 {
        if k == i {
            return 0.0;
        }
        let (lo, hi, sign) = if k < i { (k, i, 1.0) } else { (i, k, -1.0) };
        let pair = Self::pairs(self.d).iter().position(|&p| p == (lo, hi)).expect("pair in range");
        let ne = self.d * self.m * self.m;
        sign * self.phi.at(l, node, pair * ne + (j * self.m + a) * self.m + b)
    }
}

/// Builds `φ_S` and `F_S` by centered differences of `f_S`.
pub fn build_flux_corrector(fp: &FluxPotential) -> FluxSet {
    let (d, m) = (fp.d, fp.m);
    let ne = d * m * m;
    let layout = Layout::of(&fp.f, fp.time_step);
    let pairs = FluxSet::pairs(d);
    let n = layout.len();
    let fidx = |i: usize, e: usize| i * ne + e;
    // ∂_k f_{i,e} for all k, i, e
    let mut deriv = vec![vec![Vec::new(); (d + 1) * ne]; d + 1];
    for (k, dk) in deriv.iter_mut().enumerate() {
        for i in 0..=d {
            for e in 0..ne {
                dk[fidx(i, e)] = layout.diff(&component(&fp.f, fidx(i, e)), k, d);
            }
        }
    }
    let mut phi = vec![0.0; n * pairs.len() * ne];
    for (pi, &(k, i)) in pairs.iter().enumerate() {
        for e in 0..ne {
            // e indexes [j][α][β]
            for p in 0..n {
                phi[p * pairs.len() * ne + pi * ne + e] = deriv[k][fidx(i, e)][p] - deriv[i][fidx(k, e)][p];
            }
        }
    }
    let mut big_f = vec![0.0; n * ne];
    for e in 0..ne {
        for k in 0..=d {
            for p in 0..n {
                big_f[p * ne + e] += deriv[k][fidx(k, e)][p];
            }
        }
    }
    let g = fp.f.grid();
    let times = fp.f.times().to_vec();
    FluxSet {
        s: fp.s,
        d,
        m,
        phi: NodeField::from_data(&g.with_components(pairs.len() * ne), times.clone(), pairs.len() * ne, phi).expect("phi shape"),
        big_f: NodeField::from_data(&g.with_components(ne), times, ne, big_f).expect("F shape"),
        time_step: fp.time_step,
    }
}

/// Relative window residuals of the decomposition of `b_S`, one per row `i ∈ 0..=d`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub rows: Vec<f64>,
    pub total: f64,
}

fn window_indices(cs: &CorrectorSet, levels: usize) -> Result<Vec<usize>> {
    let nodes = window_nodes(&cs.grid, &cs.window)?;
    let nn = cs.grid.n_nodes();
    Ok((0..levels).flat_map(|l| nodes.iter().map(move |&p| l * nn + p)).collect())
}

/// Checks `b_{ij} = ⟨b_{ij}⟩ + Σ_k ∂_k φ_{kij} + ∂_i F_j − S⁻² f_{ij}` for
/// every row, the last row being the time row `b_{(d+1)j} = −χ_j`.
pub fn decomposition_residual(b: &BField, fp: &FluxPotential, fs: &FluxSet, cs: &CorrectorSet) -> Result<DecompositionReport> {
    let (d, m) = (fp.d, fp.m);
    let ne = d * m * m;
    let layout = Layout::of(&fp.f, fp.time_step);
    let idx = window_indices(cs, fp.f.n_levels())?;
    let mass = 1.0 / (fp.s * fp.s);
    let mut rows = Vec::with_capacity(d + 1);
    let (mut tn, mut td) = (0.0, 0.0);
    for i in 0..=d {
        let (mut num, mut den) = (0.0, 0.0);
        for e in 0..ne {
            let (j, rest) = (e / (m * m), e % (m * m));
            let (a, bb) = (rest / m, rest % m);
            let c = i * ne + e;
            let mut rhs = vec![b.means[c]; layout.len()];
            for k in 0..=d {
                if k == i {
                    continue;
                }
                let col: Vec<f64> = (0..layout.len())
                    .map(|p| fs.phi_at(p / cs.grid.n_nodes(), p % cs.grid.n_nodes(), k, i, j, a, bb))
                    .collect();
                for (r, v) in rhs.iter_mut().zip(layout.diff(&col, k, d)) {
                    *r += v;
                }
            }
            let grad_f = layout.diff(&component(&fs.big_f, e), i, d);
            let fc = component(&fp.f, c);
            for (p, r) in rhs.iter_mut().enumerate() {
                *r += grad_f[p] - mass * fc[p];
            }
            let bv = component(&b.values, c);
            for &p in &idx {
                num += (bv[p] - rhs[p]).powi(2);
                den += (bv[p] - b.means[c]).powi(2);
            }
        }
        rows.push(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() });
        tn += num;
        td += den;
    }
    let total = if td > 0.0 { (tn / td).sqrt() } else { tn.sqrt() };
    Ok(DecompositionReport { rows, total })
}

/// Relative window error of `Σ_i ∂_i h_{ij} = −S⁻² χ_j`, the divergence
/// identity of the datum (equivalently of the rows of `f_S`, since the
/// centered divergence commutes with the periodic solve).
pub fn divergence_check(b: &BField, fp: &FluxPotential, cs: &CorrectorSet) -> Result<f64> {
    let (d, m) = (fp.d, fp.m);
    let ne = d * m * m;
    let layout = Layout::of(&fp.f, fp.time_step);
    let idx = window_indices(cs, fp.f.n_levels())?;
    let mass = 1.0 / (fp.s * fp.s);
    let (mut num, mut den) = (0.0, 0.0);
    for e in 0..ne {
        let mut div = vec![0.0; layout.len()];
        for i in 0..=d {
            let h: Vec<f64> = component(&b.values, i * ne + e)[..layout.len()].iter().map(|v| b.means[i * ne + e] - v).collect();
            for (o, v) in div.iter_mut().zip(layout.diff(&h, i, d)) {
                *o += v;
            }
        }
        let chi = component(&cs.chi, e);
        for &p in &idx {
            let want = -mass * chi[p];
            num += (div[p] - want).powi(2);
            den += want * want;
        }
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}

/// Size measures of `f_S` used by the scale-uniform bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FluxNorms {
    #[serde(rename = "S")]
    pub s: f64,
    pub f_sup: f64,
    pub grad_f_sup: f64,
    pub grad_big_f_sup: f64,
    /// Window `(⨏|∇²f_S|²)^{1/2}` over spatial second derivatives.
    pub hessian_l2: f64,
    pub phi_sup: f64,
}

pub fn flux_norms(fp: &FluxPotential, fs: &FluxSet, cs: &CorrectorSet) -> Result<FluxNorms> {
    let d = fp.d;
    let layout = Layout::of(&fp.f, fp.time_step);
    let idx = window_indices(cs, fp.f.n_levels())?;
    let sup_on = |v: &[f64]| idx.iter().fold(0.0f64, |a, &p| a.max(v[p].abs()));
    let (mut f_sup, mut grad_f_sup, mut grad_big_f_sup, mut hess) = (0.0f64, 0.0f64, 0.0f64, 0.0);
    for c in 0..fp.f.n_comp() {
        let f = component(&fp.f, c);
        f_sup = f_sup.max(sup_on(&f));
        for k in 0..=d {
            let df = layout.diff(&f, k, d);
            grad_f_sup = grad_f_sup.max(sup_on(&df));
            if k < d {
                for l in 0..d {
                    let ddf = layout.diff(&df, l, d);
                    hess += idx.iter().map(|&p| ddf[p] * ddf[p]).sum::<f64>();
                }
            }
        }
    }
    for c in 0..fs.big_f.n_comp() {
        let big = component(&fs.big_f, c);
        for k in 0..=d {
            grad_big_f_sup = grad_big_f_sup.max(sup_on(&layout.diff(&big, k, d)));
        }
    }
    let phi_sup = idx.iter().fold(0.0f64, |a, &p| {
        let nn = cs.grid.n_nodes();
        (0..fs.phi.n_comp()).fold(a, |a, c| a.max(fs.phi.at(p / nn, p % nn, c).abs()))
    });
    Ok(FluxNorms {
        s: fp.s,
        f_sup,
        grad_f_sup,
        grad_big_f_sup,
        hessian_l2: (hess / idx.len() as f64).sqrt(),
        phi_sup,
    })
}
