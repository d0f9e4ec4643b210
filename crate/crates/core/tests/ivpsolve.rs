use aphom_core::apfield::{builtin_field, CoefTensor, CoefficientTensorField, FrequencyAtom};
use aphom_core::domain::Domain;
use aphom_core::error::Error;
use aphom_core::ivpsolve::*;
use aphom_core::linalg::fit_line;
use aphom_core::mesh::{assemble_step, NodeField, StepOptions};
use proptest::prelude::*;
use std::f64::consts::PI;

fn layered(amp: f64) -> CoefficientTensorField {
    CoefficientTensorField::new(
        0.4,
        CoefTensor::identity(1, 1),
        vec![FrequencyAtom::new(vec![2.0 * PI], 0.0, CoefTensor::scalar(1, 1, amp), 0.0)],
    )
    .unwrap()
}

#[test]
fn zero_data_gives_zero() {
    let field = builtin_field("periodic-1d").unwrap();
    let p = ProblemSpec::unit_interval(0.25, 0.05, Expr::zero());
    let sol = solve_eps(&field, &p).unwrap();
    assert_eq!(sol.u.sup_norm(), 0.0);
    let eff = solve_effective(&CoefTensor::identity(1, 1), &p).unwrap();
    assert_eq!(eff.u.sup_norm(), 0.0);
}

#[test]
fn constant_field_matches_the_effective_solver() {
    let mut a = CoefTensor::identity(1, 1);
    a.set(0, 0, 0, 0, 1.7);
    let field = CoefficientTensorField::new(0.4, a.clone(), vec![]).unwrap();
    let mut p = ProblemSpec::unit_interval(1.0 / 8.0, 0.05, Expr::bump(3.0, 0.3, &[0.4]));
    p.initial = Expr::sine_product(1.0, PI, 0.0);
    let (h, dt) = eps_steps(&p);
    p.h = Some(h);
    p.dt = Some(dt);
    let a_eps = solve_eps(&field, &p).unwrap();
    let a_0 = solve_effective(&a, &p).unwrap();
    assert_eq!(a_eps.u.times(), a_0.u.times());
    for (x, y) in a_eps.u.data().iter().zip(a_0.u.data()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn manufactured_oscillatory_problem_converges_at_second_order() {
    // u = sin(πx)(1 + t) is linear in t, so backward Euler adds no time error
    let eps = 1.0 / 8.0;
    let field = layered(0.5);
    let a = |x: f64| 1.0 + 0.5 * (2.0 * PI * x / eps).cos();
    let da = |x: f64| -0.5 * (2.0 * PI / eps) * (2.0 * PI * x / eps).sin();
    let exact = |x: f64, t: f64| (PI * x).sin() * (1.0 + t);
    let forcing = move |x: f64, t: f64| {
        let ux = PI * (PI * x).cos() * (1.0 + t);
        let uxx = -PI * PI * (PI * x).sin() * (1.0 + t);
        (PI * x).sin() - da(x) * ux - a(x) * uxx
    };
    let t_final = 1.0 / 32.0;
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for k in [16.0, 32.0, 64.0] {
        let h = eps / k;
        let dt = eps * eps / 16.0;
        let mut p = ProblemSpec::unit_interval(eps, t_final, Expr::zero());
        p.initial = Expr::sine_product(1.0, PI, 0.0);
        p.h = Some(h);
        p.dt = Some(dt);
        let grid = p.domain.grid(h, (0.0, t_final), dt, 1).unwrap();
        let times: Vec<f64> = (0..grid.n_levels()).map(|l| grid.time(l)).collect();
        p.forcing = Source::Nodes(NodeField::sample(&grid, times, 1, |x, t, o| o[0] = forcing(x[0], t)));
        p.record = RecordPlan::Final;
        let sol = solve_eps(&field, &p).unwrap();
        let last = sol.u.level(sol.u.n_levels() - 1);
        let err = (0..grid.n_nodes())
            .map(|n| (last[n] - exact(grid.coord(0, n), t_final)).abs())
            .fold(0.0f64, f64::max);
        hs.push(h.ln());
        errs.push(err.ln());
    }
    let (slope, _) = fit_line(&hs, &errs);
    assert!(slope >= 1.9, "observed order {slope}");
}

#[test]
fn heat_eigenfunction_decays_at_the_exact_rate() {
    let mut p = ProblemSpec::unit_interval(1.0, 0.1, Expr::zero());
    p.initial = Expr::sine_product(1.0, PI, 0.0);
    p.record = RecordPlan::Final;
    p.dt = Some(1e-4);
    let sol = solve_effective(&CoefTensor::identity(1, 1), &p).unwrap();
    let g = sol.u.grid();
    let last = sol.u.level(sol.u.n_levels() - 1);
    let decay = (-PI * PI * 0.1f64).exp();
    for n in 0..g.n_nodes() {
        let exact = decay * (PI * g.coord(0, n)).sin();
        assert!((last[n] - exact).abs() <= 0.01 * decay, "node {n}: {} vs {exact}", last[n]);
    }
}

#[test]
fn constant_forcing_relaxes_to_the_elliptic_solution() {
    let mut p = ProblemSpec::unit_interval(1.0, 4.0, Expr::constant(2.0));
    p.dt = Some(1.0 / 256.0);
    p.record = RecordPlan::Final;
    let a = CoefTensor::identity(1, 1);
    let sol = solve_effective(&a, &p).unwrap();
    let grid = sol.u.grid().clone();
    let steady = assemble_step(&aphom_core::apfield::ConstantCoefficients(a), &grid, 0.0, 0.0, f64::INFINITY, &StepOptions::default()).unwrap();
    let mut rhs = vec![2.0; grid.n_nodes()];
    for n in 0..grid.n_nodes() {
        if grid.is_boundary_node(n) {
            rhs[n] = 0.0;
        }
    }
    let mut x = vec![0.0; grid.n_nodes()];
    steady.solve(&rhs, &mut x).unwrap();
    let last = sol.u.level(sol.u.n_levels() - 1);
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in last.iter().zip(&x) {
        assert!((a - b).abs() <= 1e-8 * scale);
    }
}

#[test]
fn coarse_grids_are_refused() {
    let field = builtin_field("periodic-1d").unwrap();
    let mut p = ProblemSpec::unit_interval(1.0 / 8.0, 0.05, Expr::constant(1.0));
    p.h = Some(1.0 / 64.0);
    assert!(matches!(solve_eps(&field, &p), Err(Error::UnresolvedOscillation(_))));
    p.h = None;
    p.dt = Some(0.01);
    assert!(matches!(solve_eps(&field, &p), Err(Error::UnresolvedOscillation(_))));
}

#[test]
fn incompatible_data_are_rejected() {
    let field = builtin_field("periodic-1d").unwrap();
    let mut p = ProblemSpec::unit_interval(0.25, 0.05, Expr::zero());
    p.initial = Expr::constant(1.0);
    assert!(solve_eps(&field, &p).is_err());
    p.check_compatibility = false;
    assert!(solve_eps(&field, &p).is_ok());
}

#[test]
fn boundary_values_are_matched_exactly() {
    let field = builtin_field("spacetime-periodic-1d").unwrap();
    let mut p = ProblemSpec::unit_interval(0.25, 0.05, Expr::zero());
    p.lateral = Expr::constant(0.7);
    p.initial = Expr::constant(0.7);
    p.forcing = Source::Expr(Expr::bump(1.0, 0.2, &[0.5]));
    let sol = solve_eps(&field, &p).unwrap();
    let g = sol.u.grid();
    for l in 0..sol.u.n_levels() {
        for n in 0..g.n_nodes() {
            if g.is_boundary_node(n) {
                assert_eq!(sol.u.at(l, n, 0), 0.7);
            }
        }
    }
}

#[test]
fn heat_kernel_envelope_rate() {
    let field = CoefficientTensorField::new(0.4, CoefTensor::identity(1, 1), vec![]).unwrap();
    let opts = ProbeOptions { domain: ProbeDomain::Periodic { half_width: 3.0 }, ..ProbeOptions::default() };
    let r = fundamental_probe(&field, 1.0 / 4.0, (&[0.0], 0.0), 0.25, &opts).unwrap();
    assert!((r.kappa - 0.25).abs() <= 0.025, "{r:?}");
    // C for the heat kernel is (4π)^{-1/2}
    assert!((r.c / (4.0 * PI).powf(-0.5) - 1.0).abs() < 0.1, "{r:?}");
}

#[test]
fn probe_conserves_mass_on_a_periodic_box() {
    let field = builtin_field("periodic-1d").unwrap();
    let opts = ProbeOptions { domain: ProbeDomain::Periodic { half_width: 2.0 }, ..ProbeOptions::default() };
    let r = fundamental_probe(&field, 1.0 / 8.0, (&[0.1], 0.0), 0.1, &opts).unwrap();
    assert!(r.mass_drift < 1e-6, "{}", r.mass_drift);
}

#[test]
fn envelope_fits_are_uniform_in_eps() {
    let field = layered(0.5);
    let opts = ProbeOptions { domain: ProbeDomain::Periodic { half_width: 2.0 }, ..ProbeOptions::default() };
    let fits: Vec<FundamentalProbe> = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0]
        .iter()
        .map(|&e| fundamental_probe(&field, e, (&[0.0], 0.0), 0.25, &opts).unwrap())
        .collect();
    let spread = |v: Vec<f64>| v.iter().cloned().fold(0.0, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread(fits.iter().map(|f| f.kappa).collect()) <= 2.0, "{fits:?}");
    assert!(spread(fits.iter().map(|f| f.c).collect()) <= 2.0, "{fits:?}");
}

#[test]
fn pole_near_the_boundary_is_refused() {
    let field = builtin_field("periodic-1d").unwrap();
    let opts = ProbeOptions { domain: ProbeDomain::Bounded { domain: Domain::interval(0.0, 1.0) }, ..ProbeOptions::default() };
    let e = fundamental_probe(&field, 1.0 / 8.0, (&[0.02], 0.0), 0.05, &opts);
    assert!(matches!(e, Err(Error::PoleTooCloseToBoundary { .. })));
}

#[test]
fn green_function_vanishes_linearly_at_a_flat_boundary() {
    let field = CoefficientTensorField::new(0.4, CoefTensor::identity(1, 1), vec![]).unwrap();
    let opts = ProbeOptions { domain: ProbeDomain::Bounded { domain: Domain::interval(0.0, 1.0) }, ..ProbeOptions::default() };
    let r = fundamental_probe(&field, 1.0 / 8.0, (&[0.5], 0.0), 0.1, &opts).unwrap();
    let sigma = r.boundary_sigma.unwrap();
    assert!((sigma - 1.0).abs() < 0.1, "{sigma}");
}

#[test]
fn adjoint_probe_agrees_for_time_dependent_coefficients() {
    let field = builtin_field("spacetime-periodic-1d").unwrap();
    let opts = ProbeOptions { domain: ProbeDomain::Periodic { half_width: 1.5 }, ..ProbeOptions::default() };
    let c = adjoint_symmetry(&field, 0.5, &[0.3], &[0.0], 0.1, 0.35, &opts).unwrap();
    assert!(c.relative_gap < 0.02, "{c:?}");
}

#[test]
fn adjoint_probe_agrees_for_nonsymmetric_coefficients() {
    let tau = 2.0 * PI;
    let mut a0 = CoefTensor::identity(2, 1);
    a0.set(0, 1, 0, 0, 0.3);
    a0.set(1, 0, 0, 0, -0.1);
    let mut c = CoefTensor::zeros(2, 1);
    c.set(0, 0, 0, 0, 0.2);
    c.set(0, 1, 0, 0, 0.1);
    c.set(1, 1, 0, 0, 0.15);
    let field = CoefficientTensorField::new(0.3, a0, vec![FrequencyAtom::new(vec![tau, tau], 0.0, c, 0.3)]).unwrap();
    let opts = ProbeOptions { domain: ProbeDomain::Periodic { half_width: 1.0 }, ..ProbeOptions::default() };
    let r = adjoint_symmetry(&field, 1.0, &[0.2, 0.1], &[0.0, 0.0], 0.0, 0.1, &opts).unwrap();
    assert!(r.relative_gap < 0.02, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn energy_inequality(amp in 0.1f64..2.0, center in 0.3f64..0.7, rate in 0.0f64..3.0) {
        let field = builtin_field("quasiperiodic-1d").unwrap();
        let mut p = ProblemSpec::unit_interval(0.25, 0.1, Expr::bump(amp, 0.2, &[center]));
        p.initial = Expr::sine_product(amp, PI, rate);
        let sol = solve_eps(&field, &p).unwrap();
        // a ≥ 0.4, Poincaré on (0,1): ‖u‖² ≤ ‖∇u‖²/π²
        let f_l2 = amp * 0.12f64.sqrt();
        let u0 = amp * amp * 0.5;
        let bound = u0 + 0.1 * f_l2 * f_l2 / (0.4 * PI * PI);
        let last = sol.energy.last().unwrap();
        for e in &sol.energy {
            prop_assert!(e.l2_sq.is_finite());
            prop_assert!(e.l2_sq + 0.4 * e.dissipation <= 1.05 * bound + 1e-12, "{e:?} vs {bound}");
        }
        prop_assert!(last.dissipation > 0.0);
    }

    #[test]
    fn maximum_principle_without_forcing(center in 0.35f64..0.65, hi in 0.1f64..1.0) {
        let field = builtin_field("spacetime-periodic-1d").unwrap();
        let mut p = ProblemSpec::unit_interval(0.25, 0.05, Expr::zero());
        p.initial = Expr::bump(hi, 0.3, &[center]);
        let sol = solve_eps(&field, &p).unwrap();
        for v in sol.u.data() {
            prop_assert!(*v >= -1e-12 && *v <= hi + 1e-12);
        }
    }
}
