use aphom_core::apfield::builtin_field;
use aphom_core::corrector::{effective_tensor, solve_family, CorrectorPolicy};
use aphom_core::domain::{Domain, GraphFunction};
use aphom_core::error::Error;
use aphom_core::ivpsolve::*;
use aphom_core::mesh::NodeField;
use aphom_core::regprobe::*;
use proptest::prelude::*;
use std::f64::consts::PI;

const EPS_LIPSCHITZ: [f64; 3] = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];

fn sine_problem(eps: f64) -> ProblemSpec {
    ProblemSpec::unit_interval(eps, 0.25, Expr::sine_product(1.0, PI, 0.0))
}

fn half_line() -> Domain {
    Domain::Graph { graph: GraphDomain::flat(), d: 1, half_width: 1.0, depth: 1.0 }
}

/// Trajectory given in closed form on `domain`, levels every `dt` up to `t_final`.
fn synthetic(domain: &Domain, h: f64, t_final: f64, dt: f64, u: impl Fn(&[f64], f64) -> f64) -> SolutionField {
    let grid = domain.grid(h, (0.0, t_final), dt, 1).unwrap();
    let times: Vec<f64> = (0..=grid.steps()).map(|l| grid.time(l)).collect();
    let nf = NodeField::sample(&grid, times, 1, |xi, t, o| o[0] = u(&domain.physical(xi), t));
    SolutionField {
        u: nf,
        domain: domain.clone(),
        energy: Vec::new(),
        meta: SolverMeta { eps: None, h, dt, steps: grid.steps(), max_iterations: 0, max_residual: 0.0 },
    }
}

fn zero_problem(domain: Domain) -> ProblemSpec {
    ProblemSpec { domain, ..ProblemSpec::unit_interval(1.0, 0.25, Expr::zero()) }
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    max / min
}

#[test]
fn constant_has_zero_seminorm() {
    let g = Domain::interval(0.0, 1.0).grid(1.0 / 64.0, (0.0, 0.25), 1.0 / 64.0, 1).unwrap();
    let times: Vec<f64> = (0..=16).map(|l| l as f64 / 64.0).collect();
    let u = NodeField::sample(&g, times, 1, |_, _, o| o[0] = 3.5);
    let r = holder_seminorm(&u, &Cylinder { center: vec![0.5], t_top: 0.25, radius: 0.5 }, 0.5, 1000).unwrap();
    assert_eq!(r.seminorm, 0.0);
    assert_eq!(r.ratio, 0.0);
    assert!(r.lower_bound);
}

/// Every pair on every level, compared by brute force.
fn brute_force(u: &NodeField, region: &Cylinder, alpha: f64) -> f64 {
    let g = u.grid();
    let t = u.times();
    let mut pts = Vec::new();
    for l in 0..t.len() {
        for p in 0..g.n_nodes() {
            let x = g.node_coords(p)[0];
            if (x - region.center[0]).abs() <= region.radius + 1e-12 && t[l] > region.t_top - region.radius.powi(2) - 1e-12 && t[l] <= region.t_top + 1e-12 {
                pts.push((x, t[l], u.at(l, p, 0)));
            }
        }
    }
    let mut best = 0.0f64;
    for a in &pts {
        for b in &pts {
            let dist = (a.0 - b.0).abs() + (a.1 - b.1).abs().sqrt();
            if dist > 0.0 {
                best = best.max((a.2 - b.2).abs() / dist.powf(alpha));
            }
        }
    }
    best
}

#[test]
fn square_root_has_unit_half_holder_quotient() {
    let g = Domain::interval(-1.0, 1.0).grid(1.0 / 128.0, (0.0, 0.25), 1.0 / 64.0, 1).unwrap();
    let times: Vec<f64> = (0..=16).map(|l| l as f64 / 64.0).collect();
    let u = NodeField::sample(&g, times, 1, |x, _, o| o[0] = x[0].abs().sqrt());
    let region = Cylinder { center: vec![0.0], t_top: 0.25, radius: 0.5 };
    let r = holder_seminorm(&u, &region, 0.5, 100_000).unwrap();
    // sup |√|x| − √|y|| / |x − y|^{1/2} = 1, attained with y = 0
    assert!((r.seminorm - 1.0).abs() < 0.1, "{r:?}");
    let exact = brute_force(&u, &region, 0.5);
    assert!(r.seminorm <= exact + 1e-15);
    assert!((r.seminorm - exact).abs() < 1e-12, "{} vs {exact}", r.seminorm);
}

#[test]
fn sampled_seminorm_never_exceeds_the_exhaustive_maximum() {
    let g = Domain::interval(0.0, 1.0).grid(1.0 / 64.0, (0.0, 0.25), 1.0 / 128.0, 1).unwrap();
    let times: Vec<f64> = (0..=32).map(|l| l as f64 / 128.0).collect();
    let u = NodeField::sample(&g, times, 1, |x, t, o| o[0] = (7.0 * x[0]).sin() * (1.0 + (20.0 * t).cos()) + (x[0] - 0.3).abs().powf(0.3));
    for alpha in [0.25, 0.5, 0.75] {
        let region = Cylinder { center: vec![0.5], t_top: 0.2, radius: 0.4 };
        let r = holder_seminorm(&u, &region, alpha, 20_000).unwrap();
        let exact = brute_force(&u, &region, alpha);
        assert!(r.seminorm <= exact * (1.0 + 1e-12));
        assert!(r.seminorm >= 0.95 * exact, "alpha {alpha}: {} vs {exact}", r.seminorm);
    }
}

#[test]
fn holder_ratio_is_uniform_in_eps() {
    let f = builtin_field("periodic-1d").unwrap();
    let region = Cylinder { center: vec![0.5], t_top: 0.25, radius: 0.25 };
    let mut ratios = Vec::new();
    for eps in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0] {
        let mut p = sine_problem(eps);
        p.record = RecordPlan::Count(64);
        let s = solve_eps(&f, &p).unwrap();
        let r = holder_of_solution(&s, &p, &region, 0.5, 100_000).unwrap();
        assert!(r.forcing_term > 0.0);
        ratios.push(r.ratio);
    }
    assert!(spread(&ratios) <= 2.0, "{ratios:?}");
}

#[test]
fn holder_rejects_bad_input() {
    let g = Domain::interval(0.0, 1.0).grid(1.0 / 64.0, (0.0, 0.25), 1.0 / 64.0, 1).unwrap();
    let u = NodeField::sample(&g, vec![0.0, 0.25], 1, |_, _, o| o[0] = 1.0);
    let c = Cylinder { center: vec![0.5], t_top: 0.25, radius: 0.25 };
    assert!(holder_seminorm(&u, &c, 1.0, 10).is_err());
    assert!(holder_seminorm(&u, &Cylinder { radius: 0.75, ..c.clone() }, 0.5, 10).is_err());
}

#[test]
fn affine_profile_is_constant_in_r() {
    let dom = Domain::interval(0.0, 1.0);
    let sol = synthetic(&dom, 1.0 / 256.0, 0.25, 1.0 / 1024.0, |x, _| 2.0 * x[0] - 0.7);
    let prof = interior_profile_of(&sol, &zero_problem(dom), &[0.5], 1.0 / 16.0, 0.5, 4.0).unwrap();
    for row in prof.all_rows() {
        assert!((row.avg_grad - 2.0).abs() < 1e-9, "{row:?}");
        assert!((row.ratio - 1.0).abs() < 1e-9);
        assert!(row.big_h < 1e-9);
        assert!((row.small_h - 2.0).abs() < 1e-9);
    }
}

#[test]
fn radii_cover_eps_to_r_with_fine_rows_apart() {
    let f = builtin_field("periodic-1d").unwrap();
    let eps = 1.0 / 16.0;
    let prof = interior_lipschitz_profile(&f, eps, &sine_problem(eps), &[0.5], 0.5, 4.0).unwrap();
    assert!((prof.rows[0].r - eps).abs() < 1e-15);
    assert_eq!(prof.rows.last().unwrap().r, 0.5);
    for w in prof.rows.windows(2) {
        assert!(w[1].r > w[0].r);
    }
    assert!(!prof.fine_rows.is_empty());
    assert!(prof.fine_rows.iter().all(|r| r.r < eps));
    let max = prof.rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    assert_eq!(prof.max_ratio, max);
    assert!(prof.reverse_holder_q >= 2.0);
    let csv = prof.to_csv();
    assert_eq!(csv.lines().next().unwrap(), "r,avg_grad,rhs,ratio,psi,H,h");
    assert_eq!(csv.lines().count(), prof.rows.len() + 1);
    assert_eq!(csv.lines().nth(1).unwrap().split(',').nth(4).unwrap(), "");
}

#[test]
fn interior_lipschitz_ratio_is_uniform_in_eps() {
    let f = builtin_field("periodic-1d").unwrap();
    let maxima: Vec<f64> = EPS_LIPSCHITZ
        .iter()
        .map(|&eps| interior_lipschitz_profile(&f, eps, &sine_problem(eps), &[0.5], 0.5, 4.0).unwrap().max_ratio)
        .collect();
    assert!(spread(&maxima) <= 2.0, "{maxima:?}");
}

#[test]
fn boundary_lipschitz_ratio_is_uniform_in_eps() {
    let f = builtin_field("periodic-1d").unwrap();
    let maxima: Vec<f64> = EPS_LIPSCHITZ
        .iter()
        .map(|&eps| {
            let p = ProblemSpec { domain: half_line(), ..sine_problem(eps) };
            let prof = boundary_lipschitz_profile(&f, eps, &p, 0.5, 4.0).unwrap();
            assert!(prof.rows.iter().all(|r| r.psi.is_some()));
            prof.max_ratio
        })
        .collect();
    assert!(spread(&maxima) <= 2.0, "{maxima:?}");
}

#[test]
fn zero_data_give_zero_profiles() {
    let f = builtin_field("periodic-1d").unwrap();
    let eps = 1.0 / 16.0;
    let p = ProblemSpec { domain: half_line(), ..ProblemSpec::unit_interval(eps, 0.25, Expr::zero()) };
    let prof = boundary_lipschitz_profile(&f, eps, &p, 0.5, 4.0).unwrap();
    assert_eq!(prof.rhs, 0.0);
    for row in prof.all_rows() {
        assert_eq!(row.avg_grad, 0.0);
        assert_eq!(row.psi, Some(0.0));
        assert_eq!(row.big_h, 0.0);
        assert_eq!(row.small_h, 0.0);
        assert_eq!(row.ratio, 0.0);
    }
}

#[test]
fn psi_vanishes_on_affine_functions_of_a_curved_graph() {
    let graph = GraphDomain { psi: GraphFunction::Cosine { amplitude: 0.05, k: 2.0 * PI }, m_bound: 10.0, alpha: 0.5 };
    let dom = Domain::Graph { graph, d: 2, half_width: 0.5, depth: 0.5 };
    let sol = synthetic(&dom, 1.0 / 64.0, 0.0625, 1.0 / 256.0, |x, _| 0.3 + 1.5 * x[0] - 0.8 * x[1]);
    let prof = boundary_profile_of(&sol, &zero_problem(dom), 1.0 / 16.0, 0.25, 5.0).unwrap();
    for row in prof.all_rows() {
        assert!(row.psi.unwrap() < 1e-9, "{row:?}");
        assert!((row.small_h - (1.5f64.powi(2) + 0.8f64.powi(2)).sqrt()).abs() < 1e-9);
        // physical gradient of an affine function is its slope, up to the
        // O(h²) error of differencing through the curved reference map
        assert!((row.avg_grad - row.small_h).abs() < 1e-3 * row.small_h, "{row:?}");
    }
}

#[test]
fn psi_is_positive_for_curved_data() {
    let dom = half_line();
    let sol = synthetic(&dom, 1.0 / 256.0, 0.25, 1.0 / 1024.0, |x, t| (3.0 * x[0]).sin() * (1.0 + t));
    let prof = boundary_profile_of(&sol, &zero_problem(dom), 1.0 / 16.0, 0.5, 4.0).unwrap();
    assert!(prof.rows.iter().all(|r| r.psi.unwrap() > 0.0));
}

#[test]
fn campanato_step_holds_on_the_effective_solution() {
    let f = builtin_field("periodic-1d").unwrap();
    let fam = solve_family(&f, &[64.0], &CorrectorPolicy { h: Some(1.0 / 128.0), ..Default::default() }).unwrap();
    let a_hat = effective_tensor(&f, &fam[0]).unwrap().a_hat;
    let eps = 1.0 / 32.0;
    let p = ProblemSpec { domain: half_line(), h: Some(1.0 / 512.0), dt: Some(1.0 / 16384.0), record: RecordPlan::All, ..sine_problem(eps) };
    let u0 = solve_effective(&a_hat, &p).unwrap();
    let prof = boundary_profile_of(&u0, &p, eps, 0.5, 4.0).unwrap();
    let omega = |t: f64| t.sqrt();
    let check = campanato_check(&prof, eps, &omega);
    assert_eq!(check.theta, 0.125);
    assert!(!check.rows.is_empty());
    assert!(check.holds && check.fitted_c.is_finite(), "{check:?}");
    // both sides recomputed from the rows themselves
    let all = prof.all_rows();
    let find = |r: f64| all.iter().find(|row| (row.r / r - 1.0).abs() < 1e-9).unwrap();
    for c in &check.rows {
        let lhs = find(0.125 * c.r).big_h;
        let big = find(2.0 * c.r);
        let rhs = 0.5 * find(c.r).big_h + check.fitted_c * omega(eps / c.r) * (big.big_h + big.small_h);
        assert_eq!(lhs, c.lhs);
        assert!(lhs <= rhs * (1.0 + 1e-12), "{c:?}");
    }
    let c = h_stability(&prof);
    assert!(c.is_finite() && c > 0.0, "{c}");
}

#[test]
fn profile_preconditions_are_enforced() {
    let f = builtin_field("periodic-1d").unwrap();
    let eps = 1.0 / 16.0;
    let p = sine_problem(eps);
    assert!(interior_lipschitz_profile(&f, eps, &p, &[0.5], 0.5, 3.0).is_err());
    assert!(interior_lipschitz_profile(&f, 0.6, &p, &[0.5], 0.5, 4.0).is_err());
    let short = ProblemSpec { t_final: 0.125, ..p.clone() };
    assert!(interior_lipschitz_profile(&f, eps, &short, &[0.5], 0.5, 4.0).is_err());
    assert!(boundary_lipschitz_profile(&f, eps, &p, 0.5, 4.0).is_err());
    let coarse = ProblemSpec { h: Some(eps / 8.0), ..p };
    let e = interior_lipschitz_profile(&f, eps, &coarse, &[0.5], 0.5, 4.0);
    assert!(matches!(e, Err(Error::UnresolvedOscillation(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn profiles_ignore_added_constants(c in -5.0f64..5.0, k in 1.0f64..6.0) {
        let dom = half_line();
        let base = synthetic(&dom, 1.0 / 128.0, 0.25, 1.0 / 512.0, |x, t| (k * x[0]).sin() * (1.0 + t) + x[0] * x[0]);
        let shifted = synthetic(&dom, 1.0 / 128.0, 0.25, 1.0 / 512.0, |x, t| (k * x[0]).sin() * (1.0 + t) + x[0] * x[0] + c);
        let p = zero_problem(dom);
        let a = boundary_profile_of(&base, &p, 1.0 / 16.0, 0.5, 4.0).unwrap();
        let b = boundary_profile_of(&shifted, &p, 1.0 / 16.0, 0.5, 4.0).unwrap();
        for (ra, rb) in a.all_rows().iter().zip(b.all_rows()) {
            prop_assert!((ra.avg_grad - rb.avg_grad).abs() <= 1e-9 * (1.0 + ra.avg_grad));
            prop_assert!((ra.small_h - rb.small_h).abs() <= 1e-7 * (1.0 + ra.small_h));
            prop_assert!((ra.big_h - rb.big_h).abs() <= 1e-7 * (1.0 + ra.big_h));
        }
        let ia = interior_profile_of(&base, &p, &[0.5], 1.0 / 16.0, 0.5, 4.0).unwrap();
        let ib = interior_profile_of(&shifted, &p, &[0.5], 1.0 / 16.0, 0.5, 4.0).unwrap();
        for (ra, rb) in ia.rows.iter().zip(&ib.rows) {
            prop_assert!((ra.big_h - rb.big_h).abs() <= 1e-7 * (1.0 + ra.big_h));
        }
    }

    #[test]
    fn psi_of_affine_functions_is_zero(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let dom = half_line();
        let sol = synthetic(&dom, 1.0 / 128.0, 0.25, 1.0 / 512.0, |x, _| a + b * x[0]);
        let prof = boundary_profile_of(&sol, &zero_problem(dom), 1.0 / 16.0, 0.5, 4.0).unwrap();
        for row in prof.all_rows() {
            prop_assert!(row.psi.unwrap() < 1e-9 * (1.0 + a.abs() + b.abs()));
        }
    }
}
