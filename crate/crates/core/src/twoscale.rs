//! Two-scale discrepancy `w_ε`, convergence-rate studies and the modulus `η̂`.

use serde::Serialize;

use crate::apfield::{rho_hat, theta_hat, CoefTensor, CoefficientTensorField, SamplingPolicy};
use crate::corrector::{assemble_bs, effective_tensor, gradient_gap, interpolate, solve_family, CorrectorPolicy, CorrectorSet};
use crate::apfield::fit_decay;
use crate::apfield::DecayFit;
use crate::domain::Domain;
use crate::error::{invalid, Error, Result};
use crate::fluxcor::{build_flux_corrector, solve_flux_potential, FluxSet};
use crate::ivpsolve::{gradient_field, resample, solve_effective, solve_eps, time_weights, ProblemSpec, RecordPlan, SolutionField};
use crate::linalg::fit_line;
use crate::mesh::NodeField;
use crate::smoothing::{smooth_at, CutoffSpec, MollifierSpec};

/// `w_ε = u_ε − u₀ − ε χ_S K_ε(∇u₀) − ε² φ_{S,(d+1)ij} ∂_i K_ε(∂_j u₀)` on the ε-grid.
#[derive(Clone, Debug)]
pub struct DiscrepancyField {
    pub eps: f64,
    pub delta: f64,
    pub w: NodeField,
    /// `u₀` resampled onto the ε-grid.
    pub u0: NodeField,
    pub first_order: NodeField,
    pub second_order: NodeField,
    /// `‖u_ε − u₀‖_{L²(Ω_T)}`.
    pub err_l2: f64,
    pub w_l2: f64,
    pub w_grad_l2: f64,
    /// `‖first + second‖_{L²(Ω_T)}`.
    pub correction_l2: f64,
    /// Largest `|w|` on lateral boundary nodes and the initial level.
    pub boundary_trace: f64,
}

/// Space-time `L²` norm over recorded levels: trapezoid in space and time.
pub fn spacetime_l2(f: &NodeField) -> f64 {
    let g = f.grid();
    let t = f.times();
    let n = f.n_levels();
    let nc = f.n_comp();
    let mut acc = 0.0;
    for l in 0..n {
        let tau = if n == 1 {
            1.0
        } else if l == 0 {
            0.5 * (t[1] - t[0])
        } else if l + 1 == n {
            0.5 * (t[l] - t[l - 1])
        } else {
            0.5 * (t[l + 1] - t[l - 1])
        };
        let mut s = 0.0;
        for p in 0..g.n_nodes() {
            let w = g.quadrature_weight(p);
            for c in 0..nc {
                s += w * f.at(l, p, c).powi(2);
            }
        }
        acc += tau * s;
    }
    acc.sqrt()
}

fn check_scale(s: f64, eps: f64) -> Result<()> {
    if (s * eps - 1.0).abs() > 1e-12 {
        return Err(Error::ScaleMismatch { s, expected: 1.0 / eps });
    }
    Ok(())
}

/// Builds `w_ε` from an oscillatory and an effective trajectory. `u₀` may sit
/// on a coarser grid; it is resampled with cubic interpolation, and `∇u₀` is
/// differenced on its own grid before resampling.
pub fn assemble_discrepancy(
    u_eps: &SolutionField,
    u_0: &SolutionField,
    cs: &CorrectorSet,
    fs: &FluxSet,
    eps: f64,
    cutoff: &CutoffSpec,
    mollifier: &MollifierSpec,
) -> Result<DiscrepancyField> {
    check_scale(cs.s, eps)?;
    check_scale(fs.s, eps)?;
    if !matches!(u_eps.domain, Domain::Box { .. }) {
        return Err(invalid("the discrepancy is assembled on box domains"));
    }
    if !(cutoff.delta > eps) {
        return Err(Error::CollarTooThin { delta: cutoff.delta, eps });
    }
    let grid = u_eps.u.grid().clone();
    let (d, m) = (grid.dim(), u_eps.u.n_comp());
    if cs.dim() != d || cs.components() != m {
        return Err(invalid("corrector shape does not match the solution"));
    }
    let times = u_eps.u.times().to_vec();
    let u0 = resample(&u_0.u, &grid, &times);
    let g0 = resample(&gradient_field(&u_0.u), &grid, u_0.u.times());
    let nk = d * m;
    let eta1 = cutoff.eta1_nodes(&grid);
    let (t0, t1) = (cutoff.t0, cutoff.t1);
    let source = |tau: f64, buf: &mut [f64]| {
        if tau <= t0 || tau >= t1 {
            buf.fill(0.0);
            return;
        }
        let e2 = cutoff.eta2(tau);
        let (l0, wt) = time_weights(g0.times(), tau);
        for p in 0..grid.n_nodes() {
            let scale = eta1[p] * e2;
            for e in 0..nk {
                buf[p * nk + e] = if scale == 0.0 {
                    0.0
                } else {
                    scale * wt.iter().enumerate().map(|(k, w)| w * g0.at(l0 + k, p, e)).sum::<f64>()
                };
            }
        }
    };
    let mut kdata = Vec::with_capacity(times.len() * grid.n_nodes() * nk);
    for &t in &times {
        kdata.extend(smooth_at(&grid, nk, eps, mollifier, t, &source)?);
    }
    let kfield = NodeField::from_data(&grid.with_components(nk), times.clone(), nk, kdata)?;
    let kgrad = gradient_field(&kfield);
    let ne = d * m * m;
    let pairs = FluxSet::pairs(d);
    let mut first = NodeField::zeros(&grid, times.clone(), m);
    let mut second = NodeField::zeros(&grid, times.clone(), m);
    let mut w = NodeField::zeros(&grid, times.clone(), m);
    let mut diff = NodeField::zeros(&grid, times.clone(), m);
    let mut chi = vec![0.0; ne];
    let mut phi = vec![0.0; d * ne];
    for (l, &t) in times.iter().enumerate() {
        let s = t / (eps * eps);
        for p in 0..grid.n_nodes() {
            let x = grid.node_coords(p);
            let y: Vec<f64> = x.iter().map(|v| v / eps).collect();
            let active = (0..nk).any(|e| kfield.at(l, p, e) != 0.0) || (0..d * nk).any(|e| kgrad.at(l, p, e) != 0.0);
            if active {
                for (e, c) in chi.iter_mut().enumerate() {
                    *c = interpolate(&cs.chi, &y, s, e);
                }
                for i in 0..d {
                    // φ_{d,i,j} = −φ_{i,d,j}, stored under the pair (i, d)
                    let pair = pairs.iter().position(|&q| q == (i, d)).expect("time pair");
                    for e in 0..ne {
                        phi[i * ne + e] = -interpolate(&fs.phi, &y, s, pair * ne + e);
                    }
                }
            }
            for a in 0..m {
                let (mut f1, mut f2) = (0.0, 0.0);
                if active {
                    for j in 0..d {
                        for b in 0..m {
                            let e = (j * m + a) * m + b;
                            f1 += chi[e] * kfield.at(l, p, j * m + b);
                            for i in 0..d {
                                f2 += phi[i * ne + e] * kgrad.at(l, p, i * nk + j * m + b);
                            }
                        }
                    }
                }
                let (f1, f2) = (eps * f1, eps * eps * f2);
                let dv = u_eps.u.at(l, p, a) - u0.at(l, p, a);
                first.set(l, p, a, f1);
                second.set(l, p, a, f2);
                diff.set(l, p, a, dv);
                w.set(l, p, a, dv - f1 - f2);
            }
        }
    }
    let mut corr = first.clone();
    for (c, s) in corr.data_mut().iter_mut().zip(second.data()) {
        *c += s;
    }
    let mut trace = 0.0f64;
    for l in 0..w.n_levels() {
        for p in 0..grid.n_nodes() {
            if l == 0 && times[0] == t0 || grid.is_boundary_node(p) {
                for a in 0..m {
                    trace = trace.max(w.at(l, p, a).abs());
                }
            }
        }
    }
    Ok(DiscrepancyField {
        eps,
        delta: cutoff.delta,
        err_l2: spacetime_l2(&diff),
        w_l2: spacetime_l2(&w),
        w_grad_l2: spacetime_l2(&gradient_field(&w)),
        correction_l2: spacetime_l2(&corr),
        boundary_trace: trace,
        w,
        u0,
        first_order: first,
        second_order: second,
    })
}

/// One row of `η̂`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModulusRow {
    pub t: f64,
    /// `[Θ̂₁(1/t)]^σ`.
    pub theta_term: f64,
    /// `max_{S ≥ 1/t} ⟨|∇χ_S − ∇χ_{S_max}|⟩` over the solved scales.
    pub gap: f64,
    /// Extrapolated `∫_{S_max/2}^∞ Θ̂σ(r)/r dr` (with `C_σ = 1`).
    pub tail: f64,
    /// Running maximum in `t` of `theta_term + gap + tail + t`.
    pub eta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum DiniModel {
    /// `η̂(t) − t ≲ t^a` near 0 (surrogate `ρ̂` vanishes).
    Power { exponent: f64 },
    /// `η̂(t) ≲ |log t|^{−a}` near 0, `a = N − 1`.
    Log { exponent: f64 },
}

/// `∫₀¹ η̂(t)^γ / t dt`: measured over the `t` grid plus a model tail below it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiniCheck {
    pub gamma: f64,
    pub model: DiniModel,
    pub measured: f64,
    pub tail: f64,
    pub finite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModulusEstimate {
    pub sigma: f64,
    pub s_max: f64,
    pub rows: Vec<ModulusRow>,
    pub decay: DecayFit,
    /// Power fit `Θ̂σ(S) ≈ c S^{−p}` used for the tail, as `(c, p)`.
    pub theta_fit: (f64, f64),
    pub dini: DiniCheck,
}

impl ModulusEstimate {
    /// `η̂(t)` by log-linear interpolation between rows (clamped at the ends).
    pub fn eta(&self, t: f64) -> f64 {
        let r = &self.rows;
        if t <= r[0].t {
            return r[0].eta;
        }
        for w in r.windows(2) {
            if t <= w[1].t {
                let f = (t.ln() - w[0].t.ln()) / (w[1].t.ln() - w[0].t.ln());
                return w[0].eta + f * (w[1].eta - w[0].eta);
            }
        }
        r[r.len() - 1].eta
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulusOptions {
    pub gamma: f64,
    pub policy: CorrectorPolicy,
    pub sampling: SamplingPolicy,
}

impl Default for ModulusOptions {
    fn default() -> Self {
        ModulusOptions { gamma: 0.25, policy: CorrectorPolicy::default(), sampling: SamplingPolicy::default() }
    }
}

/// Smallest tail exponent used when the fitted `Θ̂σ` decay is flatter.
const MIN_TAIL_EXPONENT: f64 = 0.05;

fn family_scales(t_grid: &[f64], s_max: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if t_grid.is_empty() {
        return Err(invalid("empty t grid"));
    }
    let mut ts = t_grid.to_vec();
    ts.sort_by(|a, b| a.partial_cmp(b).expect("finite t"));
    ts.dedup();
    for &t in &ts {
        if !(t > 0.0 && 1.0 / t >= 1.0 && 1.0 / t <= s_max * (1.0 + 1e-12)) {
            return Err(invalid(format!("t={t} must satisfy 1 <= 1/t <= S_max={s_max}")));
        }
    }
    let mut scales: Vec<f64> = ts.iter().map(|t| 1.0 / t).filter(|s| (s / s_max - 1.0).abs() > 1e-12).collect();
    scales.push(s_max);
    Ok((ts, scales))
}

/// `η̂(t) = [Θ̂₁(1/t)]^σ + sup_{S ≥ 1/t} ⟨|∇χ_S − ∇χ|⟩ + t` with `∇χ` proxied by
/// `∇χ_{S_max}` and the neglected part bounded by a `Θ̂σ` tail integral.
pub fn modulus_estimate(
    field: &CoefficientTensorField,
    t_grid: &[f64],
    sigma: f64,
    s_max: f64,
    opts: &ModulusOptions,
) -> Result<ModulusEstimate> {
    let (_, scales) = family_scales(t_grid, s_max)?;
    let family = solve_family(field, &scales, &opts.policy)?;
    modulus_from_family(field, t_grid, sigma, &family, opts)
}

/// As [`modulus_estimate`], reusing correctors solved on one common box
/// (the last entry is `S_max`).
pub fn modulus_from_family(
    field: &CoefficientTensorField,
    t_grid: &[f64],
    sigma: f64,
    family: &[CorrectorSet],
    opts: &ModulusOptions,
) -> Result<ModulusEstimate> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(invalid(format!("sigma={sigma} must lie in (0, 1]")));
    }
    if !(opts.gamma > 0.0) {
        return Err(invalid("gamma must be positive"));
    }
    let top = family.last().ok_or_else(|| invalid("empty corrector family"))?;
    let s_max = top.s;
    let (ts, _) = family_scales(t_grid, s_max)?;
    let mut gaps = Vec::with_capacity(family.len());
    let mut theta_s = Vec::with_capacity(family.len());
    for cs in family {
        let g = if cs.s == s_max { 0.0 } else { gradient_gap(cs, top, false)? };
        gaps.push((cs.s, g));
        theta_s.push((cs.s, theta_hat(field, cs.s, sigma, &opts.sampling)?.value));
    }
    // tail: Θ̂σ(S) ≈ c S^{−p} integrated against dr/r beyond S_max/2
    let pos: Vec<(f64, f64)> = theta_s.iter().filter(|(_, v)| *v > 0.0).map(|(s, v)| (s.ln(), v.ln())).collect();
    let (theta_fit, tail) = if pos.is_empty() {
        ((0.0, 0.0), 0.0)
    } else if pos.len() == 1 {
        let (ls, lv) = pos[0];
        let p = MIN_TAIL_EXPONENT;
        let c = (lv + p * ls).exp();
        ((c, p), c * (0.5 * s_max).powf(-p) / p)
    } else {
        let (x, y): (Vec<f64>, Vec<f64>) = pos.into_iter().unzip();
        let (slope, icpt) = fit_line(&x, &y);
        let p = (-slope).max(MIN_TAIL_EXPONENT);
        let c = icpt.exp();
        ((c, p), c * (0.5 * s_max).powf(-p) / p)
    };
    let mut rows = Vec::with_capacity(ts.len());
    let mut running = 0.0f64;
    for &t in &ts {
        let theta_term = theta_hat(field, 1.0 / t, 1.0, &opts.sampling)?.value.powf(sigma);
        let gap = gaps.iter().filter(|(s, _)| *s >= (1.0 / t) * (1.0 - 1e-12)).map(|(_, g)| *g).fold(0.0, f64::max);
        running = running.max(theta_term + gap + tail + t);
        rows.push(ModulusRow { t, theta_term, gap, tail, eta: running });
    }
    let mut radii = Vec::new();
    let mut r = 2.0;
    while r <= s_max * (1.0 + 1e-12) {
        radii.push(r);
        r *= 2.0;
    }
    let rho: Vec<(f64, f64)> = radii.iter().map(|&r| (r, rho_hat(field, r, &opts.sampling))).collect();
    let decay = fit_decay(&rho);
    let dini = dini_check(&rows, sigma, &decay, opts.gamma);
    Ok(ModulusEstimate { sigma, s_max, rows, decay, theta_fit, dini })
}

fn dini_check(rows: &[ModulusRow], sigma: f64, decay: &DecayFit, gamma: f64) -> DiniCheck {
    let f = |r: &ModulusRow| r.eta.powf(gamma);
    let mut measured = 0.0;
    for w in rows.windows(2) {
        measured += 0.5 * (f(&w[0]) + f(&w[1])) * (w[1].t.ln() - w[0].t.ln());
    }
    let last = rows[rows.len() - 1];
    if last.t < 1.0 {
        measured += f(&last) * (1.0 / last.t).ln();
    }
    let first = rows[0];
    let (model, tail) = if decay.n.is_infinite() {
        let a = sigma.min(1.0);
        (DiniModel::Power { exponent: a }, f(&first) / (gamma * a))
    } else {
        let a = decay.n - 1.0;
        let q = gamma * a;
        let big_l = (1.0 / first.t).ln();
        let tail = if q > 1.0 && big_l > 0.0 {
            // η̂ ≈ c L^{−a}, c matched at the smallest t
            f(&first) * big_l / (q - 1.0)
        } else {
            f64::INFINITY
        };
        (DiniModel::Log { exponent: a }, tail)
    };
    DiniCheck { gamma, model, measured, tail, finite: tail.is_finite() }
}

/// One `ε` of a rate study.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateRow {
    pub eps: f64,
    pub delta: f64,
    pub l2_err: f64,
    pub w_l2: f64,
    pub w_grad_l2: f64,
    pub eta_hat: f64,
    pub ratio: f64,
    pub correction_l2: f64,
    pub theta_sigma: f64,
    pub boundary_trace: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// Log-log slope of `l2_err` against `ε`.
    pub slope: f64,
    /// `max ratio / min ratio`.
    pub ratio_spread: f64,
    /// Errors decrease with `ε`, allowing one inversion of at most 5%.
    pub monotone: bool,
    pub s_ref: f64,
    pub a_hat: CoefTensor,
    pub modulus: ModulusEstimate,
}

impl RateReport {
    pub const CSV_HEADER: &'static str = "eps,delta,l2_err,w_l2,w_grad_l2,eta_hat,ratio";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let vals = [r.eps, r.delta, r.l2_err, r.w_l2, r.w_grad_l2, r.eta_hat, r.ratio];
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.11e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// How `u₀` is discretized in a rate study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EffectiveGrid {
    /// Coarse grid `h₀`, time step `dt₀`, then cubic resampling.
    Coarse { h0: f64, dt0: f64 },
    /// The ε-grid of each row.
    Matched,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateOptions {
    /// Scale of the reference corrector giving `Â`; default `4/ε_min`.
    pub s_ref: Option<f64>,
    /// Cell step in fast variables; the ε-grid uses `h = ε·cell_h`. Default:
    /// the largest power of two not above `min(shortest period, 1)/16`.
    pub cell_h: Option<f64>,
    /// `None`: coarse `h₀ = 1/128`, `dt₀ = h₀²` for oscillating fields, matched grids for constant ones.
    pub effective_grid: Option<EffectiveGrid>,
    /// Recorded levels per trajectory.
    pub levels: usize,
    pub mollifier: MollifierSpec,
    pub modulus: ModulusOptions,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions {
            s_ref: None,
            cell_h: None,
            effective_grid: None,
            levels: 64,
            mollifier: MollifierSpec::default(),
            modulus: ModulusOptions::default(),
        }
    }
}

fn default_cell_h(field: &CoefficientTensorField) -> f64 {
    let target = field.shortest_spatial_period().unwrap_or(1.0).min(1.0) / 16.0;
    2f64.powi(target.log2().floor() as i32)
}

fn monotone_with_slack(errs: &[f64]) -> bool {
    let mut inversions = 0;
    for w in errs.windows(2) {
        if w[1] >= w[0] {
            if w[1] > 1.05 * w[0] {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= 1
}

/// Solves `u_ε` and `u₀` for each `ε` (decreasing), assembles `w_ε` and
/// compares `‖u_ε − u₀‖` with `η̂(ε)`.
pub fn rate_study(
    field: &CoefficientTensorField,
    problem: &ProblemSpec,
    eps_list: &[f64],
    sigma: f64,
    opts: &RateOptions,
) -> Result<RateReport> {
    if eps_list.len() < 2 {
        return Err(invalid("a rate study needs at least two values of eps"));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(invalid("eps list must be strictly decreasing"));
    }
    if !(eps_list[0] <= 1.0 && eps_list[eps_list.len() - 1] > 0.0) {
        return Err(invalid("eps values must lie in (0, 1]"));
    }
    if !matches!(problem.domain, Domain::Box { .. }) {
        return Err(invalid("rate studies run on box domains"));
    }
    let eps_min = eps_list[eps_list.len() - 1];
    let s_ref = opts.s_ref.unwrap_or(4.0 / eps_min);
    let mut scales: Vec<f64> = eps_list.iter().map(|e| 1.0 / e).collect();
    if scales.iter().any(|s| *s > s_ref * (1.0 + 1e-12)) {
        return Err(invalid("reference scale must be at least 1/eps_min"));
    }
    scales.retain(|s| (s / s_ref - 1.0).abs() > 1e-12);
    scales.push(s_ref);
    let cell_h = opts.cell_h.unwrap_or_else(|| default_cell_h(field));
    let policy = CorrectorPolicy { h: Some(cell_h), ..opts.modulus.policy.clone() };
    let family = solve_family(field, &scales, &policy)?;
    let reference = family.last().expect("reference corrector");
    let a_hat = effective_tensor(field, reference)?;
    if !a_hat.elliptic {
        return Err(invalid("reference effective tensor is not elliptic"));
    }
    let mopts = ModulusOptions { policy, ..opts.modulus.clone() };
    let modulus = modulus_from_family(field, eps_list, sigma, &family, &mopts)?;
    let constant = field.total_amplitude() == 0.0;
    let grid_choice = opts.effective_grid.unwrap_or(if constant {
        EffectiveGrid::Matched
    } else {
        EffectiveGrid::Coarse { h0: 1.0 / 128.0, dt0: 1.0 / 16384.0 }
    });
    let coarse = match grid_choice {
        EffectiveGrid::Coarse { h0, dt0 } => {
            let p = ProblemSpec { h: Some(h0), dt: Some(dt0), record: RecordPlan::Count(256), ..problem.clone() };
            Some(solve_effective(&a_hat.a_hat, &p)?)
        }
        EffectiveGrid::Matched => None,
    };
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let cs = family.iter().find(|c| (c.s * eps - 1.0).abs() <= 1e-12).expect("scale solved");
        let h = eps * cell_h;
        let mut p = ProblemSpec { eps, h: Some(h), dt: None, record: RecordPlan::Count(opts.levels), ..problem.clone() };
        let (_, dt) = crate::ivpsolve::eps_steps(&p);
        p.dt = Some(dt);
        let u_eps = solve_eps(field, &p)?;
        let u_0 = match &coarse {
            Some(c) => c.clone(),
            None => solve_effective(&a_hat.a_hat, &p)?,
        };
        let theta_sigma = theta_hat(field, cs.s, sigma, &opts.modulus.sampling)?.value;
        let theta_one = theta_hat(field, cs.s, 1.0, &opts.modulus.sampling)?.value;
        let gap = if cs.s == reference.s { 0.0 } else { gradient_gap(cs, reference, false)? };
        let delta = (eps + gap + theta_sigma + theta_one).max(2.0 * eps);
        let cutoff = CutoffSpec { delta, domain: problem.domain.clone(), t0: 0.0, t1: problem.t_final };
        let b = assemble_bs(cs, &effective_tensor(field, cs)?.a_hat)?;
        let fs = build_flux_corrector(&solve_flux_potential(&b, cs)?);
        let disc = assemble_discrepancy(&u_eps, &u_0, cs, &fs, eps, &cutoff, &opts.mollifier)?;
        let eta_hat = modulus.eta(eps);
        rows.push(RateRow {
            eps,
            delta,
            l2_err: disc.err_l2,
            w_l2: disc.w_l2,
            w_grad_l2: disc.w_grad_l2,
            eta_hat,
            ratio: disc.err_l2 / eta_hat,
            correction_l2: disc.correction_l2,
            theta_sigma,
            boundary_trace: disc.boundary_trace,
        });
    }
    let lx: Vec<f64> = rows.iter().map(|r| r.eps.ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.l2_err.max(1e-300).ln()).collect();
    let (slope, _) = fit_line(&lx, &ly);
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let errs: Vec<f64> = rows.iter().map(|r| r.l2_err).collect();
    Ok(RateReport {
        slope,
        ratio_spread: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        monotone: monotone_with_slack(&errs),
        s_ref,
        a_hat: a_hat.a_hat,
        modulus,
        rows,
    })
}
