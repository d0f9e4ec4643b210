//! One function per experiment kind. Each returns its output files (name and
//! bytes) and its named checks; the runner writes and hashes them.

use std::f64::consts::PI;
use std::fmt::Write;

use aphom_core::apfield::{rho_hat, theta_hat, CoefficientTensorField, SamplingPolicy};
use aphom_core::corrector::{
    assemble_bs, effective_tensor, energy_identity_residual, scheme_identity_residual, solve_corrector, CorrectorPolicy, CorrectorSet,
    EffectiveTensor,
};
use aphom_core::domain::{Domain, GraphDomain};
use aphom_core::fluxcor::{build_flux_corrector, decomposition_residual, divergence_check, solve_flux_potential};
use aphom_core::ivpsolve::{fundamental_probe, solve_eps, Expr, ProbeDomain, ProbeOptions, ProblemSpec, RecordPlan};
use aphom_core::linalg::fit_line;
use aphom_core::mesh::{build_grid, BoundaryKind, GridSpec, NodeField, SpaceTimeGrid};
use aphom_core::regprobe::{boundary_lipschitz_profile, holder_of_solution, interior_lipschitz_profile, Cylinder, LipschitzProfile};
use aphom_core::smoothing::{k_eps, lp_norm, smooth, CutoffSpec, MollifierSpec};
use aphom_core::twoscale::{modulus_estimate, rate_study, ModulusOptions, RateOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{ExperimentConfig, Kind};
use crate::error::{config_invalid, Result};
use crate::manifest::CheckResult;
use crate::plot::{LogLogPlot, Series};
use crate::pool::par_map;

#[derive(Debug, Default)]
pub struct StudyOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub checks: Vec<CheckResult>,
}

impl StudyOutput {
    fn file(&mut self, name: impl Into<String>, content: impl Into<Vec<u8>>) {
        self.files.push((name.into(), content.into()));
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult::new(name, passed, detail));
    }
}

pub fn run_study(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    match cfg.kind {
        Kind::Corrector => corrector(cfg, jobs),
        Kind::Effective => effective(cfg, jobs),
        Kind::Flux => flux(cfg, jobs),
        Kind::Smoothing => smoothing(cfg, jobs),
        Kind::Rate => rate(cfg),
        Kind::Modulus => modulus(cfg, jobs),
        Kind::LipschitzInterior | Kind::LipschitzBoundary => lipschitz(cfg, jobs),
        Kind::Fundamental => fundamental(cfg, jobs),
        Kind::Holder => holder(cfg, jobs),
    }
}

/// CSV number format: 12 significant digits.
fn num(v: f64) -> String {
    format!("{v:.11e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// `max/min`, with `1` for an all-zero list and `∞` when only the minimum vanishes.
pub fn spread(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(f64::MIN, f64::max);
    let lo = v.iter().cloned().fold(f64::MAX, f64::min);
    if hi == 0.0 {
        1.0
    } else if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// File-name label of a scale: `16`, `2p5`, or `inv32` for `ε = 1/32`.
fn scale_label(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else if (1.0 / v).fract() == 0.0 {
        format!("inv{:.0}", 1.0 / v)
    } else {
        format!("{v}").replace('.', "p")
    }
}

fn sorted(mut v: Vec<f64>, descending: bool) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if descending {
        v.reverse();
    }
    v
}

/// Common period of all atom frequencies (space and time), when they are
/// commensurate.
pub fn common_period(field: &CoefficientTensorField) -> Option<f64> {
    let freqs: Vec<f64> =
        field.atoms.iter().flat_map(|a| a.k.iter().cloned().chain(std::iter::once(a.lambda))).map(f64::abs).filter(|&w| w > 0.0).collect();
    let base = freqs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !base.is_finite() {
        return None;
    }
    let commensurate = freqs.iter().all(|w| {
        let q = w / base;
        (q - q.round()).abs() < 1e-9
    });
    commensurate.then(|| 2.0 * PI / base)
}

fn is_static(field: &CoefficientTensorField) -> bool {
    field.atoms.iter().all(|a| a.lambda == 0.0)
}

/// `(⟨a⁻¹⟩)⁻¹` over one period by the midpoint rule, for scalar 1D static fields.
pub fn harmonic_mean(field: &CoefficientTensorField, period: f64) -> f64 {
    let n = 8192;
    let inv: f64 = (0..n).map(|i| 1.0 / field.evaluate(&[(i as f64 + 0.5) / n as f64 * period], 0.0).data[0]).sum::<f64>() / n as f64;
    1.0 / inv
}

fn one_dimensional(cfg: &ExperimentConfig, field: &CoefficientTensorField) -> Result<()> {
    if field.d != 1 || field.m != 1 {
        return Err(config_invalid(format!("kind {} runs on scalar one-dimensional fields (got d={}, m={})", cfg.kind, field.d, field.m)));
    }
    Ok(())
}

fn corrector_policy(cfg: &ExperimentConfig) -> CorrectorPolicy {
    let p = &cfg.params;
    CorrectorPolicy { box_side: p.box_side, h: p.h, dt: p.dt, ..Default::default() }
}

fn tensor_header(n: usize) -> String {
    (0..n).map(|k| format!("a_hat_{k}")).collect::<Vec<_>>().join(",")
}

fn tensor_cells(e: &EffectiveTensor) -> String {
    e.a_hat.data.iter().map(|v| num(*v)).collect::<Vec<_>>().join(",")
}

/// Nodal dump `t,y_0..,chi_0..` of at most 16 evenly strided levels.
fn chi_dump(cs: &CorrectorSet) -> String {
    let g = &cs.grid;
    let (d, nc) = (g.dim(), cs.chi.n_comp());
    let mut out = String::from("t");
    for i in 0..d {
        let _ = write!(out, ",y{i}");
    }
    for c in 0..nc {
        let _ = write!(out, ",chi_{c}");
    }
    out.push('\n');
    let nl = cs.chi.n_levels();
    let stride = nl.div_ceil(16).max(1);
    for l in (0..nl).step_by(stride) {
        let t = cs.chi.times()[l];
        for p in 0..g.n_nodes() {
            out.push_str(&num(t));
            for y in g.node_coords(p) {
                out.push(',');
                out.push_str(&num(y));
            }
            for c in 0..nc {
                out.push(',');
                out.push_str(&num(cs.chi.at(l, p, c)));
            }
            out.push('\n');
        }
    }
    out
}

struct CorrectorRow {
    cs_dump: String,
    diagnostics: serde_json::Value,
    s: f64,
    h: f64,
    box_side: f64,
    sup: f64,
    eff: EffectiveTensor,
    energy: f64,
    scheme: f64,
    energy_2h: Option<f64>,
    theta: Option<f64>,
}

fn corrector(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    let field = cfg.resolve_field()?;
    let p = &cfg.params;
    let scales = sorted(p.s_list.clone().unwrap_or_default(), false);
    let policy = corrector_policy(cfg);
    let period = common_period(&field).filter(|_| is_static(&field) && field.d == 1 && field.m == 1 && field.has_spatial_atoms());
    let want_zero = cfg.wants("zero-corrector", !field.has_spatial_atoms());
    let want_harmonic = cfg.wants("harmonic-mean", period.is_some());
    let want_energy = cfg.wants("energy-identity", period.is_some() && p.h.is_some());
    let want_sup = cfg.wants("sup-bound", p.sigma.is_some());
    if want_harmonic && period.is_none() {
        return Err(config_invalid("harmonic-mean needs a static, scalar, one-dimensional periodic field"));
    }
    let sampling = SamplingPolicy::default();

    let rows = par_map(jobs, &scales, |&s| -> Result<CorrectorRow> {
        let cs = solve_corrector(&field, s, &policy)?;
        let eff = effective_tensor(&field, &cs)?;
        let energy_2h = if want_energy {
            let coarse = CorrectorPolicy { h: Some(2.0 * cs.diagnostics.h), ..policy.clone() };
            Some(energy_identity_residual(&solve_corrector(&field, s, &coarse)?))
        } else {
            None
        };
        let theta = match p.sigma {
            Some(sigma) => Some(theta_hat(&field, s, sigma, &sampling)?.value),
            None => None,
        };
        Ok(CorrectorRow {
            cs_dump: chi_dump(&cs),
            diagnostics: json!({ "diagnostics": cs.diagnostics, "effective": eff }),
            s,
            h: cs.diagnostics.h,
            box_side: cs.diagnostics.box_side,
            sup: cs.diagnostics.sup_norm,
            energy: energy_identity_residual(&cs),
            scheme: scheme_identity_residual(&cs),
            energy_2h,
            theta,
            eff,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let abar = period.map(|per| harmonic_mean(&field, per));
    let rel_err = |r: &CorrectorRow| abar.map(|a| (r.eff.a_hat.data[0] - a).abs() / a);

    let mut out = StudyOutput::default();
    let mut csv = format!(
        "S,h,box_side,sup_chi,{},min_form,max_form,energy_residual,scheme_residual,energy_residual_2h,theta_sigma,harmonic_rel_err\n",
        tensor_header(field.constant_term.data.len())
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            num(r.s),
            num(r.h),
            num(r.box_side),
            num(r.sup),
            tensor_cells(&r.eff),
            num(r.eff.min_form),
            num(r.eff.max_form),
            num(r.energy),
            num(r.scheme),
            opt(r.energy_2h),
            opt(r.theta),
            opt(rel_err(r)),
        );
    }
    out.file("corrector.csv", csv);
    for r in &rows {
        out.file(format!("chi_S{}.csv", scale_label(r.s)), r.cs_dump.clone());
    }
    let diag: Vec<&serde_json::Value> = rows.iter().map(|r| &r.diagnostics).collect();
    out.file("diagnostics.json", serde_json::to_string_pretty(&diag)? + "\n");

    let mut plot = LogLogPlot::new("corrector size against scale", "S", "value")
        .with(Series::new("sup |chi_S|", rows.iter().map(|r| (r.s, r.sup)).collect()));
    if abar.is_some() {
        plot = plot.with(Series::new("rel. error of A_S", rows.iter().map(|r| (r.s, rel_err(r).unwrap())).collect()));
    }
    if p.sigma.is_some() {
        plot = plot.with(Series::new("S Theta_sigma(S)", rows.iter().map(|r| (r.s, r.s * r.theta.unwrap())).collect()));
    }
    out.file("corrector.svg", plot.render());

    if want_zero {
        let a_tol = if is_static(&field) { 1e-9 } else { 1e-3 };
        let sup = rows.iter().map(|r| r.sup).fold(0.0, f64::max);
        let gap = rows.iter().map(|r| r.eff.a_hat.max_abs_diff(&field.constant_term)).fold(0.0, f64::max);
        out.check("zero-corrector", sup <= 1e-9 && gap <= a_tol, format!("max sup|chi|={sup:.3e} (tol 1e-9), max |A_S - <a>|={gap:.3e} (tol {a_tol:.0e})"));
    }
    if want_harmonic {
        let errs: Vec<f64> = rows.iter().map(|r| rel_err(r).unwrap()).collect();
        let last = *errs.last().unwrap();
        let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
        out.check(
            "harmonic-mean",
            last <= 0.05 && decreasing,
            format!("oracle {:.10}, relative errors {:?}, strictly decreasing: {decreasing}", abar.unwrap(), errs),
        );
    }
    if want_energy {
        let ok = rows.iter().all(|r| r.energy <= 5e-3 && r.energy <= 0.5 * r.energy_2h.unwrap());
        let detail: Vec<String> = rows.iter().map(|r| format!("S={}: {:.3e} (2h: {:.3e})", r.s, r.energy, r.energy_2h.unwrap())).collect();
        out.check("energy-identity", ok, detail.join("; "));
    }
    if want_sup {
        let ratios: Vec<f64> = rows.iter().map(|r| r.sup / (r.s * r.theta.unwrap_or(f64::NAN))).collect();
        let sp = spread(&ratios);
        out.check("sup-bound", sp <= 3.0, format!("sup|chi_S| / (S Theta_sigma(S)) = {ratios:?}, variation {sp:.3} (limit 3)"));
    }
    Ok(out)
}

fn effective(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    let field = cfg.resolve_field()?;
    let scales = sorted(cfg.params.s_list.clone().unwrap_or_default(), false);
    let policy = corrector_policy(cfg);
    let effs = par_map(jobs, &scales, |&s| -> Result<EffectiveTensor> { Ok(effective_tensor(&field, &solve_corrector(&field, s, &policy)?)?) })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = effs.windows(2).map(|w| w[0].a_hat.max_abs_diff(&w[1].a_hat)).collect();

    let mut out = StudyOutput::default();
    let mut csv = format!("S,{},min_form,max_form,elliptic,gap_to_next\n", tensor_header(field.constant_term.data.len()));
    for (i, e) in effs.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{},{},{},{}", num(e.s), tensor_cells(e), num(e.min_form), num(e.max_form), e.elliptic, opt(gaps.get(i).copied()));
    }
    out.file("effective.csv", csv);
    let pts = effs.iter().zip(&gaps).map(|(e, g)| (e.s, *g)).collect();
    out.file("effective.svg", LogLogPlot::new("Cauchy gap of the effective tensor", "S", "|A_S - A_next|").with(Series::new("gap", pts)).render());

    if cfg.wants("elliptic", true) {
        let bad: Vec<f64> = effs.iter().filter(|e| !e.elliptic).map(|e| e.s).collect();
        out.check("elliptic", bad.is_empty(), format!("mu={}, non-elliptic at S={bad:?}", field.mu));
    }
    if cfg.wants("cauchy", effs.len() >= 3) {
        // successive gaps may not grow (5% slack, round-off gaps count as converged)
        let ok = gaps.windows(2).all(|w| w[1] <= 1.05 * w[0] || w[1] <= 1e-12);
        out.check("cauchy", ok, format!("successive gaps {gaps:?}"));
    }
    Ok(out)
}

struct FluxRow {
    s: f64,
    h: f64,
    residual: f64,
    residual_2h: f64,
    divergence: f64,
    potential_residual: f64,
    skew: f64,
}

fn flux_run(field: &CoefficientTensorField, s: f64, policy: &CorrectorPolicy) -> Result<(f64, f64, f64, f64)> {
    let cs = solve_corrector(field, s, policy)?;
    let eff = effective_tensor(field, &cs)?;
    let b = assemble_bs(&cs, &eff.a_hat)?;
    let fp = solve_flux_potential(&b, &cs)?;
    let fs = build_flux_corrector(&fp);
    let rep = decomposition_residual(&b, &fp, &fs, &cs)?;
    let div = divergence_check(&b, &fp, &cs)?;
    // largest |φ_{kij} + φ_{ikj}| over every stored entry
    let (d, m) = (fs.d, fs.m);
    let mut skew: f64 = 0.0;
    for l in 0..fs.phi.n_levels() {
        for node in 0..cs.grid.n_nodes() {
            for k in 0..=d {
                for i in 0..=d {
                    for j in 0..d {
                        for a in 0..m {
                            for bb in 0..m {
                                skew = skew.max((fs.phi_at(l, node, k, i, j, a, bb) + fs.phi_at(l, node, i, k, j, a, bb)).abs());
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((rep.total, div, fp.residual, skew))
}

fn flux(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    let field = cfg.resolve_field()?;
    let scales = sorted(cfg.params.s_list.clone().unwrap_or_default(), false);
    let policy = corrector_policy(cfg);
    let h = cfg.params.h.expect("validated");
    let rows = par_map(jobs, &scales, |&s| -> Result<FluxRow> {
        let (residual, divergence, potential_residual, skew) = flux_run(&field, s, &policy)?;
        let (residual_2h, _, _, _) = flux_run(&field, s, &CorrectorPolicy { h: Some(2.0 * h), ..policy.clone() })?;
        Ok(FluxRow { s, h, residual, residual_2h, divergence, potential_residual, skew })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut out = StudyOutput::default();
    let mut csv = String::from("S,h,residual,residual_2h,divergence,potential_residual,skew\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            num(r.s),
            num(r.h),
            num(r.residual),
            num(r.residual_2h),
            num(r.divergence),
            num(r.potential_residual),
            num(r.skew)
        );
    }
    out.file("flux.csv", csv);
    let plot = LogLogPlot::new("flux decomposition residual", "S", "relative residual")
        .with(Series::new("h", rows.iter().map(|r| (r.s, r.residual)).collect()))
        .with(Series::new("2h", rows.iter().map(|r| (r.s, r.residual_2h)).collect()));
    out.file("flux.svg", plot.render());

    if cfg.wants("decomposition", true) {
        let ok = rows.iter().all(|r| r.residual <= 5e-2 && r.residual <= 0.5 * r.residual_2h);
        let detail: Vec<String> = rows.iter().map(|r| format!("S={}: {:.3e} (2h: {:.3e})", r.s, r.residual, r.residual_2h)).collect();
        out.check("decomposition", ok, detail.join("; "));
    }
    if cfg.wants("skew", true) {
        let worst = rows.iter().map(|r| r.skew).fold(0.0, f64::max);
        out.check("skew", worst == 0.0, format!("max |phi_kij + phi_ikj| = {worst:e}"));
    }
    Ok(out)
}

fn grid1(h: f64, t1: f64, dt: f64, bc: BoundaryKind) -> Result<SpaceTimeGrid> {
    Ok(build_grid(GridSpec::cube(1, 0.0, 1.0, h, (0.0, t1), dt, bc, 1))?)
}

fn levels(g: &SpaceTimeGrid) -> Vec<f64> {
    (0..g.n_levels()).map(|l| g.time(l)).collect()
}

fn random_field(g: &SpaceTimeGrid, seed: u64) -> Result<NodeField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = levels(g);
    let data = (0..times.len() * g.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(NodeField::from_data(g, times, 1, data)?)
}

/// `‖∇S_ε f − ∇f‖` for `f = sin(2πx)e^{−t}` on a periodic grid, both gradients
/// by the same centered difference, over levels at least `ε²` from the ends.
fn gradient_error(eps: f64, spec: &MollifierSpec) -> Result<f64> {
    let dt = 1.0 / 32768.0;
    let t1 = 1.0 / 64.0;
    let g = grid1(1.0 / 256.0, t1, dt, BoundaryKind::Periodic)?;
    let f = NodeField::sample(&g, levels(&g), 1, |x, t, o| o[0] = (2.0 * PI * x[0]).sin() * (-t).exp());
    let s = smooth(&f, eps, spec)?;
    let (n, h) = (g.n_nodes(), g.h());
    let mut acc = 0.0;
    for l in 0..f.n_levels() {
        let t = f.times()[l];
        if t < eps * eps || t > t1 - eps * eps {
            continue;
        }
        for p in 0..n {
            let (r, q) = ((p + 1) % n, (p + n - 1) % n);
            let ds = (s.at(l, r, 0) - s.at(l, q, 0)) / (2.0 * h);
            let df = (f.at(l, r, 0) - f.at(l, q, 0)) / (2.0 * h);
            acc += (ds - df).powi(2) * h * dt;
        }
    }
    Ok(acc.sqrt())
}

fn smoothing(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    let eps_list = sorted(cfg.params.eps_list.clone().unwrap_or_else(|| vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0]), true);
    let specs = [("two-sided", MollifierSpec::default()), ("one-sided", MollifierSpec::one_sided())];
    let cases: Vec<(usize, usize)> = (0..eps_list.len()).flat_map(|i| (0..specs.len()).map(move |j| (i, j))).collect();
    let seed = cfg.seed;
    let mut out = StudyOutput::default();
    let mut csv = String::from("check,spec,eps,value\n");

    if cfg.wants("young", true) {
        let ratios = par_map(jobs, &cases, |&(i, j)| -> Result<f64> {
            let eps = eps_list[i];
            let g = grid1(1.0 / 256.0, 1.0 / 32.0, eps * eps / 4.0, BoundaryKind::Dirichlet)?;
            let f = random_field(&g, seed.wrapping_add(i as u64))?;
            Ok(lp_norm(&smooth(&f, eps, &specs[j].1)?, 2.0) / lp_norm(&f, 2.0))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (&(i, j), r) in cases.iter().zip(&ratios) {
            let _ = writeln!(csv, "young,{},{},{}", specs[j].0, num(eps_list[i]), num(*r));
        }
        let worst = ratios.iter().cloned().fold(0.0, f64::max);
        out.check("young", worst <= 1.0 + 1e-10, format!("max |S_eps f| / |f| = {worst:.15} (limit 1 + 1e-10)"));
    }
    if cfg.wants("gradient-order", true) {
        let errs = par_map(jobs, &cases, |&(i, j)| gradient_error(eps_list[i], &specs[j].1)).into_iter().collect::<Result<Vec<_>>>()?;
        let mut plot = LogLogPlot::new("gradient approximation", "eps", "|grad S_eps f - grad f|");
        let mut slopes = Vec::new();
        for (j, (name, _)) in specs.iter().enumerate() {
            let pts: Vec<(f64, f64)> = cases.iter().zip(&errs).filter(|((_, jj), _)| *jj == j).map(|(&(i, _), e)| (eps_list[i], *e)).collect();
            for (e, v) in &pts {
                let _ = writeln!(csv, "gradient-order,{name},{},{}", num(*e), num(*v));
            }
            let x: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
            slopes.push(if pts.len() >= 2 { fit_line(&x, &y).0 } else { f64::NAN });
            plot = plot.with(Series::new(*name, pts));
        }
        out.file("smoothing.svg", plot.render());
        let ok = slopes.iter().all(|s| *s >= 0.9);
        out.check("gradient-order", ok, format!("log-log slopes (two-sided, one-sided) = {slopes:?} (limit 0.9)"));
    }
    if cfg.wants("collar", true) {
        let results = par_map(jobs, &eps_list, |&eps| -> Result<(usize, usize)> {
            let g = grid1(1.0 / 256.0, 0.25, eps * eps / 4.0, BoundaryKind::Dirichlet)?;
            let f = random_field(&g, seed.wrapping_add(1000))?;
            let cut = CutoffSpec { delta: 3.0 * eps, domain: Domain::interval(0.0, 1.0), t0: 0.0, t1: 0.25 };
            let k = k_eps(&f, eps, &cut, &MollifierSpec::default())?;
            let (mut checked, mut nonzero) = (0, 0);
            for p in 0..g.n_nodes() {
                if cut.domain.node_distance(&g, p) <= cut.delta - eps {
                    for l in 0..k.n_levels() {
                        checked += 1;
                        if k.at(l, p, 0) != 0.0 {
                            nonzero += 1;
                        }
                    }
                }
            }
            Ok((checked, nonzero))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (eps, (c, nz)) in eps_list.iter().zip(&results) {
            let _ = writeln!(csv, "collar-checked,two-sided,{},{}", num(*eps), num(*c as f64));
            let _ = writeln!(csv, "collar-nonzero,two-sided,{},{}", num(*eps), num(*nz as f64));
        }
        let ok = results.iter().all(|(c, nz)| *c > 0 && *nz == 0);
        out.check("collar", ok, format!("(collar values checked, nonzero) per eps = {results:?}"));
    }
    out.files.insert(0, ("smoothing.csv".into(), csv.into_bytes()));
    Ok(out)
}

fn sine_problem(cfg: &ExperimentConfig, eps: f64) -> ProblemSpec {
    let p = &cfg.params;
    let mut problem = ProblemSpec::unit_interval(eps, p.t_final.unwrap_or(0.25), Expr::sine_product(p.forcing.unwrap_or(1.0), PI, 0.0));
    problem.h = p.h;
    problem.dt = p.dt;
    problem
}

fn rate(cfg: &ExperimentConfig) -> Result<StudyOutput> {
    let field = cfg.resolve_field()?;
    one_dimensional(cfg, &field)?;
    let p = &cfg.params;
    let eps_list = sorted(p.eps_list.clone().unwrap_or_default(), true);
    let sigma = p.sigma.expect("validated");
    let mut problem = sine_problem(cfg, 1.0);
    problem.h = None;
    problem.dt = None;
    let opts = RateOptions {
        s_ref: p.s_ref,
        cell_h: p.h,
        modulus: ModulusOptions { gamma: p.gamma.unwrap_or(0.25), ..Default::default() },
        ..Default::default()
    };
    let report = rate_study(&field, &problem, &eps_list, sigma, &opts)?;

    let mut out = StudyOutput::default();
    out.file("rate.csv", report.to_csv());
    let plot = LogLogPlot::new("convergence rate", "eps", "L2 norm")
        .with(Series::new("|u_eps - u_0|", report.rows.iter().map(|r| (r.eps, r.l2_err)).collect()))
        .with(Series::new("|w_eps|", report.rows.iter().map(|r| (r.eps, r.w_l2)).collect()))
        .with(Series::new("eta_hat(eps)", report.rows.iter().map(|r| (r.eps, r.eta_hat)).collect()));
    out.file("rate.svg", plot.render());
    let summary = json!({
        "slope": report.slope,
        "ratio_spread": report.ratio_spread,
        "monotone": report.monotone,
        "s_ref": report.s_ref,
        "a_hat": report.a_hat.data,
        "sigma": sigma,
    });
    out.file("summary.json", serde_json::to_string_pretty(&summary)? + "\n");

    let oscillating = field.has_spatial_atoms();
    if cfg.wants("floor", !oscillating) {
        let worst = report.rows.iter().map(|r| r.l2_err.max(r.w_l2)).fold(0.0, f64::max);
        out.check("floor", worst <= 1e-10, format!("largest error {worst:.3e} (tolerance floor 1e-10)"));
    }
    if cfg.wants("slope", oscillating) {
        out.check("slope", report.slope >= 0.9, format!("fitted slope {:.4} (limit 0.9)", report.slope));
    }
    if cfg.wants("monotone", oscillating) {
        let errs: Vec<f64> = report.rows.iter().map(|r| r.l2_err).collect();
        out.check("monotone", report.monotone, format!("errors {errs:?}"));
    }
    if cfg.wants("ratio-spread", false) {
        let ratios: Vec<f64> = report.rows.iter().map(|r| r.ratio).collect();
        out.check("ratio-spread", report.ratio_spread <= 3.0, format!("|u_eps - u_0| / eta_hat = {ratios:?}, variation {:.3} (limit 3)", report.ratio_spread));
    }
    Ok(out)
}

fn modulus(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    let field = cfg.resolve_field()?;
    let p = &cfg.params;
    let sigma = p.sigma.expect("validated");
    let s_max = p.s_max.unwrap_or(256.0);
    let t_grid = sorted(p.t_grid.clone().unwrap_or_else(|| vec![1.0 / 64.0, 1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0]), false);
    let sampling = SamplingPolicy::default();
    let opts = ModulusOptions { gamma: p.gamma.unwrap_or(0.25), policy: corrector_policy(cfg), sampling: sampling.clone() };
    let m = modulus_estimate(&field, &t_grid, sigma, s_max, &opts)?;
    let scales = match &p.s_list {
        Some(s) => sorted(s.clone(), false),
        None => std::iter::successors(Some(2.0), |s| Some(s * 2.0)).take_while(|s| *s <= s_max).collect(),
    };
    let thetas = par_map(jobs, &scales, |&s| -> Result<(f64, f64, f64)> {
        let ts = theta_hat(&field, s, sigma, &sampling)?;
        Ok((ts.value, theta_hat(&field, s, 1.0, &sampling)?.value, ts.r_min))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut out = StudyOutput::default();
    let mut csv = String::from("t,theta_term,gap,tail,eta\n");
    for r in &m.rows {
        let _ = writeln!(csv, "{},{},{},{},{}", num(r.t), num(r.theta_term), num(r.gap), num(r.tail), num(r.eta));
    }
    out.file("modulus.csv", csv);
    let mut csv = String::from("S,theta_sigma,theta_1,r_min\n");
    for (s, (ts, t1, r)) in scales.iter().zip(&thetas) {
        let _ = writeln!(csv, "{},{},{},{}", num(*s), num(*ts), num(*t1), num(*r));
    }
    out.file("theta.csv", csv);
    let plot = LogLogPlot::new("almost-periodicity surrogate", "S", "Theta(S)")
        .with(Series::new(format!("Theta_{sigma}"), scales.iter().zip(&thetas).map(|(s, t)| (*s, t.0)).collect()))
        .with(Series::new("Theta_1", scales.iter().zip(&thetas).map(|(s, t)| (*s, t.1)).collect()));
    out.file("theta.svg", plot.render());
    let plot = LogLogPlot::new("modulus eta", "t", "eta_hat(t)").with(Series::new("eta_hat", m.rows.iter().map(|r| (r.t, r.eta)).collect()));
    out.file("modulus.svg", plot.render());
    let summary = json!({ "sigma": sigma, "s_max": s_max, "decay": m.decay, "theta_fit": m.theta_fit, "dini": m.dini });
    out.file("summary.json", serde_json::to_string_pretty(&summary)? + "\n");

    if cfg.wants("eta-monotone", true) {
        let ok = m.rows.windows(2).all(|w| w[1].eta >= w[0].eta);
        out.check("eta-monotone", ok, format!("eta_hat = {:?}", m.rows.iter().map(|r| r.eta).collect::<Vec<_>>()));
    }
    if cfg.wants("dini", true) {
        out.check("dini", m.dini.finite, format!("gamma {}, measured {:.4e}, tail {:.4e}", m.dini.gamma, m.dini.measured, m.dini.tail));
    }
    let period = common_period(&field);
    if cfg.wants("periodic-exactness", period.is_some()) {
        let per = period.ok_or_else(|| config_invalid("periodic-exactness needs a field with commensurate frequencies"))?;
        let radii = [2f64.sqrt() * per, 2.0 * per, 4.0 * per, 8.0 * per];
        let rho: Vec<f64> = radii.iter().map(|&r| rho_hat(&field, r, &sampling)).collect();
        let rho_ok = rho.iter().all(|v| v.abs() <= 1e-12);
        let excess = scales
            .iter()
            .zip(&thetas)
            .filter(|(s, _)| **s >= 2.0)
            .map(|(s, t)| t.0 - (2f64.sqrt() * per / s).powf(sigma))
            .fold(f64::MIN, f64::max);
        out.check(
            "periodic-exactness",
            rho_ok && excess <= 1e-12,
            format!("rho_hat at R = {radii:?} is {rho:?}; max Theta_sigma(S) - (sqrt2 P/S)^sigma = {excess:.3e}"),
        );
    }
    Ok(out)
}

fn profile_csv_name(prefix: &str, eps: f64) -> String {
    format!("{prefix}_eps_{}.csv", scale_label(eps))
}

fn lipschitz(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    let field = cfg.resolve_field()?;
    one_dimensional(cfg, &field)?;
    let p = &cfg.params;
    let eps_list = sorted(p.eps_list.clone().unwrap_or_default(), true);
    let big_r = p.radius.unwrap_or(0.5);
    let exponent = p.p.unwrap_or(4.0);
    let center = p.center.clone().unwrap_or_else(|| vec![0.5]);
    let boundary = cfg.kind == Kind::LipschitzBoundary;
    let profiles = par_map(jobs, &eps_list, |&eps| -> Result<LipschitzProfile> {
        let problem = sine_problem(cfg, eps);
        if boundary {
            let domain = Domain::Graph { graph: GraphDomain::flat(), d: 1, half_width: 1.0, depth: 1.0 };
            Ok(boundary_lipschitz_profile(&field, eps, &ProblemSpec { domain, ..problem }, big_r, exponent)?)
        } else {
            Ok(interior_lipschitz_profile(&field, eps, &problem, &center, big_r, exponent)?)
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut out = StudyOutput::default();
    let mut summary = String::from("eps,max_ratio,rhs,reverse_holder_q\n");
    let title = if boundary { "boundary Lipschitz profile" } else { "interior Lipschitz profile" };
    let mut plot = LogLogPlot::new(title, "r", "profile / RHS");
    for (eps, prof) in eps_list.iter().zip(&profiles) {
        let _ = writeln!(summary, "{},{},{},{}", num(*eps), num(prof.max_ratio), num(prof.rhs), num(prof.reverse_holder_q));
        out.file(profile_csv_name("profile", *eps), prof.to_csv());
        out.file(profile_csv_name("profile_fine", *eps), prof.fine_csv());
        plot = plot.with(Series::new(format!("eps={eps}"), prof.rows.iter().map(|r| (r.r, r.ratio)).collect()));
    }
    out.files.insert(0, ("lipschitz.csv".into(), summary.into_bytes()));
    out.file("profile.svg", plot.render());
    if cfg.wants("uniform", eps_list.len() >= 2) {
        let maxima: Vec<f64> = profiles.iter().map(|p| p.max_ratio).collect();
        let sp = spread(&maxima);
        out.check("uniform", sp <= 2.0, format!("max_r profile/RHS per eps = {maxima:?}, variation {sp:.4} (limit 2)"));
    }
    Ok(out)
}

fn fundamental(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    let field = cfg.resolve_field()?;
    one_dimensional(cfg, &field)?;
    let p = &cfg.params;
    let eps_list = sorted(p.eps_list.clone().unwrap_or_default(), true);
    let pole = p.center.clone().unwrap_or_else(|| vec![0.0]);
    let horizon = p.horizon.unwrap_or(0.25);
    let opts = ProbeOptions { domain: ProbeDomain::Periodic { half_width: p.half_width.unwrap_or(2.0) }, h: p.h, dt: p.dt, ..Default::default() };
    let probes = par_map(jobs, &eps_list, |&eps| fundamental_probe(&field, eps, (&pole, 0.0), horizon, &opts))
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let mut out = StudyOutput::default();
    let mut csv = String::from("eps,kappa,c,r_squared,n_samples,c_pointwise,mass_drift\n");
    for r in &probes {
        let _ = writeln!(csv, "{},{},{},{},{},{},{}", num(r.eps), num(r.kappa), num(r.c), num(r.r_squared), r.n_samples, num(r.c_pointwise), num(r.mass_drift));
    }
    out.file("fundamental.csv", csv);
    let plot = LogLogPlot::new("Gaussian envelope fit", "eps", "fitted value")
        .with(Series::new("kappa", probes.iter().map(|r| (r.eps, r.kappa)).collect()))
        .with(Series::new("C", probes.iter().map(|r| (r.eps, r.c)).collect()));
    out.file("fundamental.svg", plot.render());

    let constant = !field.has_spatial_atoms() && is_static(&field);
    if cfg.wants("kappa", constant) {
        if !constant {
            return Err(config_invalid("the kappa check needs a constant coefficient field"));
        }
        let target = 1.0 / (4.0 * field.constant_term.data[0]);
        let worst = probes.iter().map(|r| (r.kappa - target).abs() / target).fold(0.0, f64::max);
        out.check("kappa", worst <= 0.1, format!("kappa {:?} vs 1/(4a) = {target}, worst relative gap {worst:.4} (limit 0.1)", probes.iter().map(|r| r.kappa).collect::<Vec<_>>()));
    }
    if cfg.wants("mass", true) {
        let worst = probes.iter().map(|r| r.mass_drift).fold(0.0, f64::max);
        out.check("mass", worst <= 1e-6, format!("largest mass drift {worst:.3e} (limit 1e-6)"));
    }
    if cfg.wants("stable", !constant && probes.len() >= 2) {
        let sk = spread(&probes.iter().map(|r| r.kappa).collect::<Vec<_>>());
        let sc = spread(&probes.iter().map(|r| r.c).collect::<Vec<_>>());
        out.check("stable", sk <= 2.0 && sc <= 2.0, format!("variation of kappa {sk:.4}, of C {sc:.4} (limit 2)"));
    }
    Ok(out)
}

fn holder(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    let field = cfg.resolve_field()?;
    one_dimensional(cfg, &field)?;
    let p = &cfg.params;
    let eps_list = sorted(p.eps_list.clone().unwrap_or_default(), true);
    let alpha = p.alpha.unwrap_or(0.5);
    let budget = p.pair_budget.unwrap_or(100_000);
    let t_final = p.t_final.unwrap_or(0.25);
    let region = Cylinder { center: p.center.clone().unwrap_or_else(|| vec![0.5]), t_top: t_final, radius: p.radius.unwrap_or(0.25) };
    let reports = par_map(jobs, &eps_list, |&eps| -> Result<_> {
        let mut problem = sine_problem(cfg, eps);
        problem.record = RecordPlan::Count(64);
        let sol = solve_eps(&field, &problem)?;
        Ok(holder_of_solution(&sol, &problem, &region, alpha, budget)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut out = StudyOutput::default();
    let mut csv = String::from("eps,seminorm,lower_bound,solution_term,forcing_term,rhs,ratio,pairs\n");
    for (eps, r) in eps_list.iter().zip(&reports) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            num(*eps),
            num(r.seminorm),
            r.lower_bound,
            num(r.solution_term),
            num(r.forcing_term),
            num(r.rhs),
            num(r.ratio),
            r.pairs
        );
    }
    out.file("holder.csv", csv);
    let plot = LogLogPlot::new("Hoelder seminorm", "eps", "value")
        .with(Series::new("seminorm", eps_list.iter().zip(&reports).map(|(e, r)| (*e, r.seminorm)).collect()))
        .with(Series::new("ratio", eps_list.iter().zip(&reports).map(|(e, r)| (*e, r.ratio)).collect()));
    out.file("holder.svg", plot.render());
    if cfg.wants("uniform", eps_list.len() >= 2) {
        let ratios: Vec<f64> = reports.iter().map(|r| r.ratio).collect();
        let sp = spread(&ratios);
        out.check("uniform", sp <= 2.0, format!("seminorm / RHS per eps = {ratios:?}, variation {sp:.4} (limit 2)"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use aphom_core::apfield::builtin_field;

    #[test]
    fn labels_and_spread() {
        assert_eq!(scale_label(16.0), "16");
        assert_eq!(scale_label(1.0 / 32.0), "inv32");
        assert_eq!(scale_label(2.5), "2p5");
        assert_eq!(spread(&[0.0, 0.0]), 1.0);
        assert_eq!(spread(&[0.0, 1.0]), f64::INFINITY);
        assert_eq!(spread(&[2.0, 1.0, 4.0]), 4.0);
    }

    #[test]
    fn periods_of_builtins() {
        assert!((common_period(&builtin_field("periodic-1d").unwrap()).unwrap() - 1.0).abs() < 1e-12);
        assert!((common_period(&builtin_field("spacetime-periodic-1d").unwrap()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(common_period(&builtin_field("quasiperiodic-1d").unwrap()), None);
        assert_eq!(common_period(&builtin_field("constant-1d").unwrap()), None);
    }

    #[test]
    fn harmonic_mean_of_a_two_valued_profile() {
        // a = 1 + 0.5 cos 2πy has harmonic mean √(1 − 0.25)
        let f = aphom_core::apfield::field_from_json(
            r#"{"d":1,"m":1,"mu":0.4,"constant_term":[[[[1.0]]]],"atoms":[{"k":[6.283185307179586],"lambda":0.0,"amplitude":[[[[0.5]]]],"phase":0.0}]}"#,
        )
        .unwrap();
        assert!((harmonic_mean(&f, 1.0) - 0.75f64.sqrt()).abs() < 1e-10);
    }
}
