//! Regularity probes: parabolic Hölder seminorms, large-scale Lipschitz
//! profiles in interior and boundary cylinders, and the excess functionals
//! `H(r)`, `h(r)`, `Ψ(r; u)` used by the Campanato iteration.
//!
//! Cylinders are `Q_r(x₀, t₀) = B(x₀, r) × (t₀ − r², t₀]` in the interior and
//! `T_r × (t₀ − r², t₀]` at the boundary point `(0, ψ(0)) = 0` of a graph
//! domain. Averages are equal-weight node averages on the uniform grid.

use serde::{Deserialize, Serialize};

pub use crate::domain::GraphDomain;
use crate::apfield::CoefficientTensorField;
use crate::domain::Domain;
use crate::error::{invalid, Result};
use crate::ivpsolve::{eps_steps, gradient_field, interpolate_cubic, solve_eps, ProblemSpec, RecordPlan, SolutionField, Source};
use crate::linalg::least_squares;
use crate::mesh::NodeField;

/// Contraction factor of the Campanato diagnostic.
pub const CAMPANATO_THETA: f64 = 0.125;

/// Time levels sampled per cylinder.
const LEVELS_PER_CYLINDER: usize = 8;

/// Parabolic cylinder `B(center, radius) × (t_top − radius², t_top]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: Vec<f64>,
    pub t_top: f64,
    pub radius: f64,
}

impl Cylinder {
    fn contains(&self, x: &[f64], t: f64, scale: f64) -> bool {
        let r = self.radius * scale;
        let tol = 1e-12 * (1.0 + r);
        let d2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum();
        d2.sqrt() <= r + tol && t <= self.t_top + tol && t > self.t_top - r * r - tol
    }
}

/// Sampled parabolic Hölder seminorm over a cylinder and the matching
/// right-hand side `r^{−α}(⨏_{2Q}|u|²)^{1/2} + sup_{ℓ<r} ℓ^{2−α}(⨏_{Q_ℓ}|f|²)^{1/2}`.
///
/// The seminorm is a maximum over sampled pairs, so it bounds the true
/// seminorm from below.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HolderReport {
    pub alpha: f64,
    pub region: Cylinder,
    pub seminorm: f64,
    pub lower_bound: bool,
    pub pairs: usize,
    /// Maximizing pair `((x, t), (y, s))`.
    pub argmax: Option<((Vec<f64>, f64), (Vec<f64>, f64))>,
    pub solution_term: f64,
    pub forcing_term: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Seminorm of `u` on `region` with zero forcing.
pub fn holder_seminorm(u: &NodeField, region: &Cylinder, alpha: f64, pair_budget: usize) -> Result<HolderReport> {
    holder_seminorm_with(u, None, region, alpha, pair_budget)
}

/// Seminorm of `u` on `region`; `forcing`, when given, lives on the same grid
/// and levels as `u`.
pub fn holder_seminorm_with(
    u: &NodeField,
    forcing: Option<&NodeField>,
    region: &Cylinder,
    alpha: f64,
    pair_budget: usize,
) -> Result<HolderReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha={alpha} must lie in (0, 1)")));
    }
    let g = u.grid();
    let d = g.dim();
    if region.center.len() != d || !(region.radius > 0.0) {
        return Err(invalid("region does not match the field dimension"));
    }
    if let Some(f) = forcing {
        if f.n_levels() != u.n_levels() || f.grid().n_nodes() != g.n_nodes() {
            return Err(invalid("forcing must share the grid and levels of u"));
        }
    }
    let (lo, hi) = (&g.spec().lower, &g.spec().upper);
    let times = u.times();
    let inside = (0..d).all(|a| region.center[a] - region.radius >= lo[a] - 1e-12 && region.center[a] + region.radius <= hi[a] + 1e-12)
        && region.t_top <= times[times.len() - 1] + 1e-12
        && region.t_top - region.radius * region.radius >= times[0] - 1e-12;
    if !inside {
        return Err(invalid("region leaves the grid"));
    }

    // index box of the region: spatial multi-index range and level range
    let n = g.nodes_per_axis();
    let h = g.h();
    let axis_range: Vec<(usize, usize)> = (0..d)
        .map(|a| {
            let i0 = ((region.center[a] - region.radius - lo[a]) / h - 1e-9).ceil().max(0.0) as usize;
            let i1 = (((region.center[a] + region.radius - lo[a]) / h + 1e-9).floor() as usize).min(n[a] - 1);
            (i0, i1)
        })
        .collect();
    let levels: Vec<usize> = (0..times.len()).filter(|&l| region.contains(&region.center, times[l], 1.0)).collect();
    let mut points: Vec<(usize, usize)> = Vec::new();
    let mut idx = vec![0usize; d];
    let box_len: usize = axis_range.iter().map(|(a, b)| b - a + 1).product();
    for &l in &levels {
        for flat in 0..box_len {
            let mut rest = flat;
            for a in 0..d {
                let w = axis_range[a].1 - axis_range[a].0 + 1;
                idx[a] = axis_range[a].0 + rest % w;
                rest /= w;
            }
            let p = g.node_index(&idx);
            if region.contains(&g.node_coords(p), times[l], 1.0) {
                points.push((l, p));
            }
        }
    }

    let quotient = |a: (usize, usize), b: (usize, usize)| -> f64 {
        let xa = g.node_coords(a.1);
        let xb = g.node_coords(b.1);
        let dx: f64 = xa.iter().zip(&xb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let dist = dx + (times[a.0] - times[b.0]).abs().sqrt();
        if dist == 0.0 {
            return 0.0;
        }
        (u.at(a.0, a.1, 0) - u.at(b.0, b.1, 0)).abs() / dist.powf(alpha)
    };

    let mut best = 0.0f64;
    let mut arg: Option<((usize, usize), (usize, usize))> = None;
    let mut pairs = 0usize;
    let consider = |a: (usize, usize), b: (usize, usize), best: &mut f64, arg: &mut Option<_>| {
        let q = quotient(a, b);
        if q > *best {
            *best = q;
            *arg = Some((a, b));
        }
    };

    // near-diagonal pairs: every offset within 5 cells and 5 levels, each unordered pair once
    let level_pos: std::collections::HashMap<usize, usize> = levels.iter().enumerate().map(|(k, &l)| (l, k)).collect();
    let span = 11usize.pow(d as u32);
    for &(l, p) in &points {
        let base = g.multi_index(p);
        for dl in 0..=5usize {
            let Some(&kl) = level_pos.get(&l) else { continue };
            let Some(&l2) = levels.get(kl + dl) else { break };
            for flat in 0..span {
                let mut rest = flat;
                let mut off = vec![0isize; d];
                for o in off.iter_mut() {
                    *o = (rest % 11) as isize - 5;
                    rest /= 11;
                }
                if dl == 0 && off.iter().rev().find(|&&o| o != 0).map_or(true, |&o| o < 0) {
                    continue;
                }
                let mut ok = true;
                for a in 0..d {
                    let j = base[a] as isize + off[a];
                    if j < axis_range[a].0 as isize || j > axis_range[a].1 as isize {
                        ok = false;
                        break;
                    }
                    idx[a] = j as usize;
                }
                if !ok {
                    continue;
                }
                let q = g.node_index(&idx);
                if !region.contains(&g.node_coords(q), times[l2], 1.0) {
                    continue;
                }
                pairs += 1;
                consider((l, p), (l2, q), &mut best, &mut arg);
            }
        }
    }

    // long-range pairs from a Halton sequence in the product of the region with itself
    if !points.is_empty() {
        for k in 1..=pair_budget {
            let a = points[((halton(k, 0) * points.len() as f64) as usize).min(points.len() - 1)];
            let b = points[((halton(k, 1) * points.len() as f64) as usize).min(points.len() - 1)];
            pairs += 1;
            consider(a, b, &mut best, &mut arg);
        }
    }

    // right-hand side
    let mut sum = 0.0;
    let mut count = 0usize;
    for l in 0..times.len() {
        for p in 0..g.n_nodes() {
            if region.contains(&g.node_coords(p), times[l], 2.0) {
                sum += u.at(l, p, 0).powi(2);
                count += 1;
            }
        }
    }
    let solution_term = region.radius.powf(-alpha) * (sum / count.max(1) as f64).sqrt();
    let forcing_term = match forcing {
        Some(f) => forcing_sup(f, &points, region, alpha),
        None => 0.0,
    };
    let rhs = solution_term + forcing_term;
    let ratio = ratio_of(best, rhs);
    let to_point = |(l, p): (usize, usize)| (g.node_coords(p), times[l]);
    Ok(HolderReport {
        alpha,
        region: region.clone(),
        seminorm: best,
        lower_bound: true,
        pairs,
        argmax: arg.map(|(a, b)| (to_point(a), to_point(b))),
        solution_term,
        forcing_term,
        rhs,
        ratio,
    })
}

/// Seminorm of a trajectory with the problem's forcing sampled on its grid.
pub fn holder_of_solution(sol: &SolutionField, problem: &ProblemSpec, region: &Cylinder, alpha: f64, pair_budget: usize) -> Result<HolderReport> {
    let g = sol.u.grid();
    let forcing = NodeField::sample(g, sol.u.times().to_vec(), 1, |xi, t, out| {
        out[0] = forcing_value(&problem.forcing, &problem.domain.physical(xi), xi, t);
    });
    holder_seminorm_with(&sol.u, Some(&forcing), region, alpha, pair_budget)
}

/// `sup ℓ^{2−α}(⨏_{Q_ℓ(y,s)}|f|²)^{1/2}` over dyadic `ℓ < r` down to two
/// cells and a strided subset of centers in the region.
fn forcing_sup(f: &NodeField, points: &[(usize, usize)], region: &Cylinder, alpha: f64) -> f64 {
    let g = f.grid();
    let times = f.times();
    let stride = (points.len() / 64).max(1);
    let mut best = 0.0f64;
    let mut ell = 0.5 * region.radius;
    while ell >= 2.0 * g.h() {
        for &(l, p) in points.iter().step_by(stride) {
            let cyl = Cylinder { center: g.node_coords(p), t_top: times[l], radius: ell };
            let (mut s, mut c) = (0.0, 0usize);
            for l2 in 0..times.len() {
                for q in 0..g.n_nodes() {
                    if cyl.contains(&g.node_coords(q), times[l2], 1.0) {
                        s += f.at(l2, q, 0).powi(2);
                        c += 1;
                    }
                }
            }
            if c > 0 {
                best = best.max(ell.powf(2.0 - alpha) * (s / c as f64).sqrt());
            }
        }
        ell *= 0.5;
    }
    best
}

/// Radical-inverse (Halton) coordinate `dim` of index `k`.
fn halton(mut k: usize, dim: usize) -> f64 {
    const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    let b = PRIMES[dim % PRIMES.len()];
    let mut f = 1.0;
    let mut r = 0.0;
    while k > 0 {
        f /= b as f64;
        r += f * (k % b) as f64;
        k /= b;
    }
    r
}

fn ratio_of(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    Interior,
    Boundary,
}

/// One radius of a Lipschitz profile.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub r: f64,
    /// `(⨏|∇u|²)^{1/2}` over the cylinder of radius `r`.
    pub avg_grad: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// `Ψ(r; u)` (boundary profiles only).
    pub psi: Option<f64>,
    /// Excess `H(r)`.
    pub big_h: f64,
    /// Slope size `h(r) = |E_r|` of the best affine fit.
    pub small_h: f64,
    /// `r(⨏|F|^p)^{1/p}`.
    pub forcing: f64,
    /// `(⨏|∇u|^q)^{1/q}` on the reverse-Hölder exponent grid.
    #[serde(skip)]
    q_means: Vec<f64>,
}

/// Gradient averages over cylinders of radius `ε ≤ r ≤ R` and the estimate's
/// right-hand side `(⨏_R|∇u|²)^{1/2} + R(⨏_R|F|^p)^{1/p} [+ R^{−1}‖f‖_{C^{1+α}(Δ_R)}]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzProfile {
    pub kind: ProfileKind,
    pub center: Vec<f64>,
    pub t_top: f64,
    pub eps: f64,
    pub big_r: f64,
    pub p: f64,
    pub rhs: f64,
    /// `R^{−1}‖f‖_{C^{1+α}(Δ_R)}` (zero for interior profiles).
    pub boundary_term: f64,
    /// Rows with `ε ≤ r ≤ R`, strictly increasing in `r`.
    pub rows: Vec<ProfileRow>,
    /// Rows with `r < ε`, outside the scope of the large-scale estimate.
    pub fine_rows: Vec<ProfileRow>,
    pub max_ratio: f64,
    /// Largest exponent `q` whose reverse-Hölder ratio stays below
    /// [`REVERSE_HOLDER_LIMIT`] on every row (reported, never asserted).
    pub reverse_holder_q: f64,
}

pub const PROFILE_CSV_HEADER: &str = "r,avg_grad,rhs,ratio,psi,H,h";

/// Bound on `(⨏_r|∇u|^q)^{1/q} / (⨏_{2r}|∇u|²)^{1/2}` defining the fitted `q`.
pub const REVERSE_HOLDER_LIMIT: f64 = 2.0;

fn q_grid() -> Vec<f64> {
    (0..=60).map(|k| 2.0 + 0.5 * k as f64).collect()
}

impl LipschitzProfile {
    /// Large-scale rows as CSV with 12 significant digits; `psi` is empty
    /// for interior profiles.
    pub fn to_csv(&self) -> String {
        rows_csv(&self.rows)
    }

    pub fn fine_csv(&self) -> String {
        rows_csv(&self.fine_rows)
    }

    /// Fine and large-scale rows together, increasing in `r`.
    pub fn all_rows(&self) -> Vec<&ProfileRow> {
        self.fine_rows.iter().chain(&self.rows).collect()
    }
}

fn rows_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from(PROFILE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let psi = r.psi.map(|v| format!("{v:.11e}")).unwrap_or_default();
        s.push_str(&format!(
            "{:.11e},{:.11e},{:.11e},{:.11e},{},{:.11e},{:.11e}\n",
            r.r, r.avg_grad, r.rhs, r.ratio, psi, r.big_h, r.small_h
        ));
    }
    s
}

/// Geometric radii: fine ones from `ε/4` below `ε`, then `ε·2^{k/2}` up to `R`
/// with `R` itself always last.
fn radii(eps: f64, big_r: f64) -> (Vec<f64>, Vec<f64>) {
    let step = 2f64.sqrt();
    let fine: Vec<f64> = (0..4).map(|k| 0.25 * eps * step.powi(k)).filter(|&r| r < eps * (1.0 - 1e-12)).collect();
    let mut main = Vec::new();
    let mut k = 0;
    loop {
        let r = eps * step.powi(k);
        if r > big_r * (1.0 - 1e-9) {
            break;
        }
        main.push(r);
        k += 1;
    }
    main.push(big_r);
    (fine, main)
}

/// Level indices sampling `(t₀ − r², t₀]` for every radius.
fn levels_for(radii: &[f64], t_top: f64, dt: f64) -> Vec<usize> {
    let mut v: Vec<usize> = Vec::new();
    for &r in radii {
        for k in 0..LEVELS_PER_CYLINDER {
            let t = t_top - k as f64 * r * r / LEVELS_PER_CYLINDER as f64;
            v.push((t / dt).round().max(0.0) as usize);
        }
    }
    v.sort_unstable();
    v.dedup();
    v
}

/// Positions of recorded levels inside `(t₀ − r², t₀]`, one per sampling time.
fn cylinder_levels(times: &[f64], t_top: f64, r: f64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..LEVELS_PER_CYLINDER)
        .map(|k| {
            let t = t_top - k as f64 * r * r / LEVELS_PER_CYLINDER as f64;
            let pos = times.partition_point(|&s| s < t);
            match (pos.checked_sub(1), times.get(pos)) {
                (Some(a), Some(&b)) if (times[a] - t).abs() < (b - t).abs() => a,
                (Some(a), None) => a,
                _ => pos,
            }
        })
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Scalar forcing evaluated at a physical point (nodal forcing at reference nodes).
fn forcing_value(src: &Source, x: &[f64], xi: &[f64], t: f64) -> f64 {
    match src {
        Source::Expr(e) => e.value(x, t),
        Source::Nodes(f) => interpolate_cubic(f, xi, t, 0),
    }
}

/// Measures one cylinder of radius `r`: gradient averages, affine excess,
/// forcing average and (at the boundary) `Ψ`.
fn measure(ctx: &Context, r: f64) -> Result<ProfileRow> {
    let sol = ctx.sol;
    let g = sol.u.grid();
    let d = g.dim();
    let times = sol.u.times();
    let lv = cylinder_levels(times, ctx.t_top, r);
    let nodes: Vec<usize> = (0..g.n_nodes()).filter(|&p| ctx.in_cylinder(&ctx.xs[p], r)).collect();
    if nodes.is_empty() {
        return Err(invalid(format!("no grid node inside the cylinder of radius {r}")));
    }
    let qs = q_grid();
    let mut grad_sq = 0.0;
    let mut q_sums = vec![0.0; qs.len()];
    let mut f_sum = 0.0;
    let mut design = Vec::with_capacity(lv.len() * nodes.len());
    let mut vals = Vec::with_capacity(lv.len() * nodes.len());
    for &l in &lv {
        for &p in &nodes {
            let gr = ctx.physical_gradient(l, p);
            let n2: f64 = gr.iter().map(|v| v * v).sum();
            grad_sq += n2;
            let n1 = n2.sqrt();
            for (s, q) in q_sums.iter_mut().zip(&qs) {
                *s += n1.powf(*q);
            }
            let f = forcing_value(&ctx.problem.forcing, &ctx.xs[p], &g.node_coords(p), times[l]);
            f_sum += f.abs().powf(ctx.p);
            let mut row = Vec::with_capacity(d + 1);
            row.push(1.0);
            row.extend(ctx.xs[p].iter().zip(&ctx.center).map(|(a, b)| a - b));
            design.push(row);
            vals.push(sol.u.at(l, p, 0));
        }
    }
    let count = (lv.len() * nodes.len()) as f64;
    let avg_grad = (grad_sq / count).sqrt();
    let q_means: Vec<f64> = q_sums.iter().zip(&qs).map(|(s, q)| (s / count).powf(1.0 / q)).collect();
    let forcing = r * (f_sum / count).powf(1.0 / ctx.p);

    // L² projection onto affine functions of x
    let shift = vals.iter().sum::<f64>() / count;
    let centered: Vec<f64> = vals.iter().map(|v| v - shift).collect();
    let coef = least_squares(&design, &centered, None)?;
    let resid = |x: &[f64], v: f64| -> f64 {
        let mut fit = coef[0] + shift;
        for a in 0..d {
            fit += coef[a + 1] * (x[a] - ctx.center[a]);
        }
        v - fit
    };
    let mut r2 = 0.0;
    for (row, v) in design.iter().zip(&vals) {
        let x: Vec<f64> = row[1..].iter().zip(&ctx.center).map(|(a, b)| a + b).collect();
        r2 += resid(&x, *v).powi(2);
    }
    let l2_excess = (r2 / count).sqrt();
    let small_h = coef[1..].iter().map(|v| v * v).sum::<f64>().sqrt();

    let (psi, big_h) = match ctx.kind {
        ProfileKind::Interior => (None, l2_excess / r + forcing),
        ProfileKind::Boundary => {
            let samples = ctx.boundary_samples(r, &lv, |p, l| resid(&ctx.xs[p], sol.u.at(l, p, 0)));
            let psi = (l2_excess + lateral_norm(&samples, ctx.alpha)) / r;
            (Some(psi), psi + forcing)
        }
    };
    Ok(ProfileRow { r, avg_grad, rhs: 0.0, ratio: 0.0, psi, big_h, small_h, forcing, q_means })
}

/// Values of a function on the lateral patch: `(tangential coordinate, t, value)`.
type LateralSamples = Vec<(f64, f64, f64)>;

/// `sup|g| + sup|∂_τ g| + [∂_τ g]_α + [g]_{(1+α)/2, t}` with parabolic
/// distance for the tangential Hölder part and divided differences along
/// the boundary for `∂_τ`.
fn lateral_norm(samples: &LateralSamples, alpha: f64) -> f64 {
    let sup = samples.iter().fold(0.0f64, |a, s| a.max(s.2.abs()));
    let mut by_time: std::collections::BTreeMap<u64, Vec<(f64, f64)>> = Default::default();
    for &(x, t, v) in samples {
        by_time.entry(t.to_bits()).or_default().push((x, v));
    }
    // tangential derivative by centered differences along each time slice
    let mut deriv: Vec<(f64, f64, f64)> = Vec::new();
    for (tb, pts) in &by_time {
        let t = f64::from_bits(*tb);
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for i in 1..pts.len().saturating_sub(1) {
            let dv = (pts[i + 1].1 - pts[i - 1].1) / (pts[i + 1].0 - pts[i - 1].0);
            deriv.push((pts[i].0, t, dv));
        }
    }
    let dsup = deriv.iter().fold(0.0f64, |a, s| a.max(s.2.abs()));
    let mut dhold = 0.0f64;
    for i in 0..deriv.len() {
        for j in (i + 1)..deriv.len() {
            let dist = (deriv[i].0 - deriv[j].0).abs() + (deriv[i].1 - deriv[j].1).abs().sqrt();
            if dist > 0.0 {
                dhold = dhold.max((deriv[i].2 - deriv[j].2).abs() / dist.powf(alpha));
            }
        }
    }
    let mut thold = 0.0f64;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            if samples[i].0 == samples[j].0 && samples[i].1 != samples[j].1 {
                let dt = (samples[i].1 - samples[j].1).abs();
                thold = thold.max((samples[i].2 - samples[j].2).abs() / dt.powf(0.5 * (1.0 + alpha)));
            }
        }
    }
    sup + dsup + dhold + thold
}

struct Context<'a> {
    sol: &'a SolutionField,
    problem: &'a ProblemSpec,
    kind: ProfileKind,
    center: Vec<f64>,
    t_top: f64,
    p: f64,
    alpha: f64,
    graph: Option<GraphDomain>,
    xs: Vec<Vec<f64>>,
    grad: NodeField,
}

impl Context<'_> {
    fn in_cylinder(&self, x: &[f64], r: f64) -> bool {
        let tol = 1e-9 * r;
        match self.kind {
            ProfileKind::Interior => {
                let d2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() <= r + tol
            }
            ProfileKind::Boundary => match x.len() {
                1 => x[0] >= -tol && x[0] <= r + tol,
                _ => {
                    let b = self.graph.as_ref().map_or(0.0, |g| g.psi.value(x[0]));
                    x[0].abs() <= r + tol && x[1] >= b - tol && x[1] <= b + r + tol
                }
            },
        }
    }

    /// Physical gradient: `∂₁ − ψ'∂₂` and `∂₂` on a sheared graph domain.
    fn physical_gradient(&self, l: usize, p: usize) -> Vec<f64> {
        let d = self.center.len();
        let mut gr: Vec<f64> = (0..d).map(|k| self.grad.at(l, p, k)).collect();
        if let (Some(gd), 2) = (&self.graph, d) {
            gr[0] -= gd.psi.slope(self.xs[p][0]) * gr[1];
        }
        gr
    }

    /// Boundary nodes of `I_r` on the listed levels, evaluated by `value`.
    fn boundary_samples(&self, r: f64, levels: &[usize], value: impl Fn(usize, usize) -> f64) -> LateralSamples {
        let g = self.sol.u.grid();
        let times = self.sol.u.times();
        let tol = 1e-9 * r;
        let nodes: Vec<usize> = (0..g.n_nodes())
            .filter(|&p| {
                let xi = g.node_coords(p);
                match xi.len() {
                    1 => xi[0].abs() <= tol,
                    _ => xi[1].abs() <= tol && xi[0].abs() <= r + tol,
                }
            })
            .collect();
        let mut out = Vec::with_capacity(nodes.len() * levels.len());
        for &l in levels {
            for &p in &nodes {
                let tang = if self.xs[p].len() == 1 { 0.0 } else { self.xs[p][0] };
                out.push((tang, times[l], value(p, l)));
            }
        }
        out
    }
}

/// Oscillatory solve recording exactly the levels the profile samples.
fn profile_solve(field: &CoefficientTensorField, eps: f64, problem: &ProblemSpec, big_r: f64) -> Result<SolutionField> {
    let mut p = problem.clone();
    p.eps = eps;
    let (_, dt) = eps_steps(&p);
    let (fine, main) = radii(eps, big_r);
    let all: Vec<f64> = fine.into_iter().chain(main).collect();
    p.record = RecordPlan::Levels(levels_for(&all, p.t_final, dt));
    solve_eps(field, &p)
}

fn check_profile_args(eps: f64, problem: &ProblemSpec, big_r: f64, p: f64) -> Result<()> {
    let d = problem.domain.dim();
    if !(eps > 0.0 && eps <= big_r) {
        return Err(invalid(format!("need 0 < eps <= R (eps={eps}, R={big_r})")));
    }
    if !(p > (d + 2) as f64) {
        return Err(invalid(format!("p={p} must exceed d+2={}", d + 2)));
    }
    if big_r * big_r > problem.t_final * (1.0 + 1e-12) {
        return Err(invalid(format!("R²={} exceeds the time horizon {}", big_r * big_r, problem.t_final)));
    }
    if problem.m != 1 {
        return Err(invalid("profiles are defined for scalar problems"));
    }
    Ok(())
}

/// Interior profile of the oscillatory solution around `center` at the final
/// time of `problem`.
pub fn interior_lipschitz_profile(
    field: &CoefficientTensorField,
    eps: f64,
    problem: &ProblemSpec,
    center: &[f64],
    big_r: f64,
    p: f64,
) -> Result<LipschitzProfile> {
    check_profile_args(eps, problem, big_r, p)?;
    let sol = profile_solve(field, eps, problem, big_r)?;
    interior_profile_of(&sol, problem, center, eps, big_r, p)
}

/// Interior profile of an existing trajectory; rows below `r_min` are fine rows.
pub fn interior_profile_of(sol: &SolutionField, problem: &ProblemSpec, center: &[f64], r_min: f64, big_r: f64, p: f64) -> Result<LipschitzProfile> {
    check_profile_args(r_min, problem, big_r, p)?;
    if center.len() != problem.domain.dim() {
        return Err(invalid("center dimension does not match the domain"));
    }
    build_profile(sol, problem, ProfileKind::Interior, center.to_vec(), r_min, big_r, p)
}

/// Boundary profile at the origin of a graph domain `problem.domain`, with
/// lateral data `problem.lateral` and forcing `problem.forcing`.
pub fn boundary_lipschitz_profile(
    field: &CoefficientTensorField,
    eps: f64,
    problem: &ProblemSpec,
    big_r: f64,
    p: f64,
) -> Result<LipschitzProfile> {
    check_profile_args(eps, problem, big_r, p)?;
    let sol = profile_solve(field, eps, problem, big_r)?;
    boundary_profile_of(&sol, problem, eps, big_r, p)
}

/// Boundary profile of an existing trajectory on a graph domain.
pub fn boundary_profile_of(sol: &SolutionField, problem: &ProblemSpec, r_min: f64, big_r: f64, p: f64) -> Result<LipschitzProfile> {
    check_profile_args(r_min, problem, big_r, p)?;
    let Domain::Graph { d, half_width, depth, .. } = &problem.domain else {
        return Err(invalid("boundary profiles need a graph domain"));
    };
    if big_r > *depth || (*d == 2 && big_r > *half_width) {
        return Err(invalid(format!("R={big_r} leaves the graph domain")));
    }
    build_profile(sol, problem, ProfileKind::Boundary, vec![0.0; *d], r_min, big_r, p)
}

fn build_profile(
    sol: &SolutionField,
    problem: &ProblemSpec,
    kind: ProfileKind,
    center: Vec<f64>,
    r_min: f64,
    big_r: f64,
    p: f64,
) -> Result<LipschitzProfile> {
    let g = sol.u.grid();
    let xs: Vec<Vec<f64>> = (0..g.n_nodes()).map(|q| problem.domain.physical(&g.node_coords(q))).collect();
    let graph = match &problem.domain {
        Domain::Graph { graph, .. } => Some(graph.clone()),
        Domain::Box { .. } => None,
    };
    let alpha = graph.as_ref().map_or(1.0, |gd| gd.alpha);
    let t_top = *sol.u.times().last().expect("trajectory has levels");
    let ctx = Context { sol, problem, kind, center: center.clone(), t_top, p, alpha, graph, xs, grad: gradient_field(&sol.u) };

    let (fine_r, main_r) = radii(r_min, big_r);
    let mut fine: Vec<ProfileRow> = fine_r.iter().map(|&r| measure(&ctx, r)).collect::<Result<_>>()?;
    let mut main: Vec<ProfileRow> = main_r.iter().map(|&r| measure(&ctx, r)).collect::<Result<_>>()?;
    let top = main.last().expect("R row");

    let boundary_term = match kind {
        ProfileKind::Interior => 0.0,
        ProfileKind::Boundary => {
            let lv = cylinder_levels(sol.u.times(), t_top, big_r);
            let times = sol.u.times();
            let samples = ctx.boundary_samples(big_r, &lv, |q, l| problem.lateral.value(&ctx.xs[q], times[l]));
            lateral_norm(&samples, alpha) / big_r
        }
    };
    let rhs = top.avg_grad + top.forcing + boundary_term;
    for row in fine.iter_mut().chain(main.iter_mut()) {
        row.rhs = rhs;
        row.ratio = ratio_of(row.avg_grad, rhs);
    }
    let max_ratio = main.iter().fold(0.0f64, |a, row| a.max(row.ratio));

    // fitted reverse-Hölder exponent over consecutive (r, 2r) pairs
    let all: Vec<&ProfileRow> = fine.iter().chain(main.iter()).collect();
    let qs = q_grid();
    let mut fitted_q = qs[qs.len() - 1];
    'scan: for (k, q) in qs.iter().enumerate() {
        for a in &all {
            let Some(b) = all.iter().find(|b| (b.r / a.r - 2.0).abs() < 1e-9) else { continue };
            if ratio_of(a.q_means[k], b.avg_grad) > REVERSE_HOLDER_LIMIT {
                fitted_q = if k == 0 { *q } else { qs[k - 1] };
                break 'scan;
            }
        }
    }

    Ok(LipschitzProfile {
        kind,
        center,
        t_top,
        eps: r_min,
        big_r,
        p,
        rhs,
        boundary_term,
        rows: main,
        fine_rows: fine,
        max_ratio,
        reverse_holder_q: fitted_q,
    })
}

/// Row of the Campanato diagnostic `H(θr) ≤ ½H(r) + C ω(δ/r){H(2r) + h(2r)}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CampanatoRow {
    pub r: f64,
    pub lhs: f64,
    pub half: f64,
    /// `ω(δ/r){H(2r) + h(2r)}`.
    pub coupling: f64,
    /// Smallest `C` making this row hold.
    pub needed_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CampanatoCheck {
    pub theta: f64,
    pub delta: f64,
    pub rows: Vec<CampanatoRow>,
    /// Largest per-row requirement; every row holds with this constant.
    pub fitted_c: f64,
    /// Whether a finite constant exists.
    pub holds: bool,
}

fn row_at<'a>(rows: &[&'a ProfileRow], r: f64) -> Option<&'a ProfileRow> {
    rows.iter().copied().find(|row| (row.r / r - 1.0).abs() < 1e-9)
}

/// Evaluates both sides of the Campanato step on every radius `r` whose
/// `θr` and `2r` also appear in the profile (fine rows included).
pub fn campanato_check(profile: &LipschitzProfile, delta: f64, omega: &dyn Fn(f64) -> f64) -> CampanatoCheck {
    let all = profile.all_rows();
    let mut rows = Vec::new();
    for row in &all {
        let (Some(small), Some(big)) = (row_at(&all, CAMPANATO_THETA * row.r), row_at(&all, 2.0 * row.r)) else { continue };
        let lhs = small.big_h;
        let half = 0.5 * row.big_h;
        let coupling = omega(delta / row.r) * (big.big_h + big.small_h);
        let excess = lhs - half;
        let needed_c = if excess <= 0.0 {
            0.0
        } else if coupling > 0.0 {
            excess / coupling
        } else {
            f64::INFINITY
        };
        rows.push(CampanatoRow { r: row.r, lhs, half, coupling, needed_c });
    }
    let fitted_c = rows.iter().fold(0.0f64, |a, r| a.max(r.needed_c));
    CampanatoCheck { theta: CAMPANATO_THETA, delta, rows, fitted_c, holds: fitted_c.is_finite() }
}

/// Fitted `C` in `|h(t) − h(s)| ≤ C H(2r)` over `r ≤ t, s ≤ 2r`, with `r`
/// and `2r` both profile radii.
pub fn h_stability(profile: &LipschitzProfile) -> f64 {
    let all = profile.all_rows();
    let mut c = 0.0f64;
    for row in &all {
        let r = row.r;
        let Some(top) = row_at(&all, 2.0 * r) else { continue };
        let band: Vec<&&ProfileRow> = all.iter().filter(|o| o.r >= r * (1.0 - 1e-9) && o.r <= 2.0 * r * (1.0 + 1e-9)).collect();
        for a in &band {
            for b in &band {
                let gap = (a.small_h - b.small_h).abs();
                c = c.max(ratio_of(gap, top.big_h));
            }
        }
    }
    c
}
