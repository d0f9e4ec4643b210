use aphom_core::domain::{Domain, GraphDomain, GraphFunction};
use aphom_core::linalg::fit_line;
use aphom_core::mesh::{build_grid, BoundaryKind, GridSpec, NodeField, SpaceTimeGrid};
use aphom_core::smoothing::*;
use aphom_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn grid1(h: f64, t1: f64, dt: f64, bc: BoundaryKind) -> SpaceTimeGrid {
    build_grid(GridSpec::cube(1, 0.0, 1.0, h, (0.0, t1), dt, bc, 1)).unwrap()
}

fn levels(g: &SpaceTimeGrid) -> Vec<f64> {
    (0..g.n_levels()).map(|l| g.time(l)).collect()
}

fn random_field(g: &SpaceTimeGrid, times: Vec<f64>, seed: u64) -> NodeField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = times.len() * g.n_nodes();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    NodeField::from_data(g, times, 1, data).unwrap()
}

#[test]
fn constant_is_reproduced_in_the_interior() {
    let eps = 1.0 / 8.0;
    let g = grid1(1.0 / 128.0, 0.125, eps * eps / 8.0, BoundaryKind::Dirichlet);
    let f = NodeField::sample(&g, levels(&g), 1, |_, _, o| o[0] = 2.5);
    for spec in [MollifierSpec::default(), MollifierSpec::one_sided()] {
        let s = smooth(&f, eps, &spec).unwrap();
        for l in 0..s.n_levels() {
            let t = s.times()[l];
            if t < eps * eps || t > 0.125 - eps * eps {
                continue;
            }
            for p in 0..g.n_nodes() {
                let x = g.coord(0, p);
                if x >= eps && x <= 1.0 - eps {
                    assert!((s.at(l, p, 0) - 2.5).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn young_inequality_on_random_fields() {
    let eps = 1.0 / 16.0;
    let g = grid1(1.0 / 256.0, 1.0 / 32.0, eps * eps / 4.0, BoundaryKind::Dirichlet);
    for seed in 0..4 {
        let f = random_field(&g, levels(&g), seed);
        for spec in [MollifierSpec::default(), MollifierSpec::one_sided()] {
            let s = smooth(&f, eps, &spec).unwrap();
            assert!(lp_norm(&s, 2.0) <= lp_norm(&f, 2.0) * (1.0 + 1e-10));
        }
    }
    let g2 = build_grid(GridSpec::cube(2, 0.0, 1.0, 1.0 / 64.0, (0.0, 0.0), 1.0, BoundaryKind::Dirichlet, 1)).unwrap();
    let f = random_field(&g2, vec![0.0], 9);
    let s = smooth(&f, 0.1, &MollifierSpec::default()).unwrap();
    assert!(lp_norm(&s, 2.0) <= lp_norm(&f, 2.0) * (1.0 + 1e-10));
}

/// `‖∇S_ε f − ∇f‖` over interior levels for `f = sin(2πx)e^{−t}` on a
/// periodic grid, with the same centered difference on both sides.
fn gradient_error(eps: f64, spec: &MollifierSpec) -> f64 {
    let dt = 1.0 / 32768.0;
    let t1 = 1.0 / 64.0;
    let g = grid1(1.0 / 256.0, t1, dt, BoundaryKind::Periodic);
    let f = NodeField::sample(&g, levels(&g), 1, |x, t, o| o[0] = (2.0 * PI * x[0]).sin() * (-t).exp());
    let s = smooth(&f, eps, spec).unwrap();
    let n = g.n_nodes();
    let h = g.h();
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
    acc.sqrt()
}

#[test]
fn gradient_approximation_order() {
    for spec in [MollifierSpec::default(), MollifierSpec::one_sided()] {
        let eps = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
        let errs: Vec<f64> = eps.iter().map(|&e| gradient_error(e, &spec)).collect();
        let x: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
        let y: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let (slope, _) = fit_line(&x, &y);
        assert!(slope >= 0.9, "{spec:?}: {errs:?} slope {slope}");
    }
}

#[test]
fn derivative_bounds_share_one_constant() {
    let spec = MollifierSpec::default();
    let g = grid1(1.0 / 512.0, 1.0 / 128.0, 1.0 / 65536.0, BoundaryKind::Periodic);
    let f = random_field(&g, levels(&g), 3);
    let mut bounds = Vec::new();
    for eps in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0] {
        let c = smoothing_constants(&f, eps, &spec).unwrap();
        assert!(c.spatial <= c.spatial_bound * (1.0 + 1e-10), "{c:?}");
        assert!(c.temporal <= c.temporal_bound * (1.0 + 1e-10), "{c:?}");
        bounds.push((c.spatial_bound, c.temporal_bound));
    }
    for k in 0..2 {
        let v: Vec<f64> = bounds.iter().map(|b| if k == 0 { b.0 } else { b.1 }).collect();
        let (lo, hi) = v.iter().fold((f64::MAX, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
        assert!(hi <= 1.5 * lo, "{bounds:?}");
    }
}

fn collar_setup(eps: f64, delta: f64) -> (NodeField, CutoffSpec) {
    let g = grid1(1.0 / 256.0, 0.25, eps * eps / 4.0, BoundaryKind::Dirichlet);
    let f = random_field(&g, levels(&g), 11);
    let cut = CutoffSpec { delta, domain: Domain::interval(0.0, 1.0), t0: 0.0, t1: 0.25 };
    (f, cut)
}

#[test]
fn k_eps_vanishes_on_the_collar() {
    let eps = 1.0 / 32.0;
    let (f, cut) = collar_setup(eps, 3.0 * eps);
    let k = k_eps(&f, eps, &cut, &MollifierSpec::default()).unwrap();
    let g = f.grid();
    let mut checked = 0;
    for p in 0..g.n_nodes() {
        if cut.domain.node_distance(g, p) <= cut.delta - eps {
            for l in 0..k.n_levels() {
                assert_eq!(k.at(l, p, 0), 0.0);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
    assert!(lp_norm(&k, 2.0) <= lp_norm(&f, 2.0) * (1.0 + 1e-10));
}

#[test]
fn k_eps_of_one_away_from_the_boundary() {
    let eps = 1.0 / 32.0;
    let delta = 2.0 * eps;
    let g = grid1(1.0 / 256.0, 0.25, eps * eps / 4.0, BoundaryKind::Dirichlet);
    let f = NodeField::sample(&g, levels(&g), 1, |_, _, o| o[0] = 1.0);
    let cut = CutoffSpec { delta, domain: Domain::interval(0.0, 1.0), t0: 0.0, t1: 0.25 };
    let k = k_eps(&f, eps, &cut, &MollifierSpec::default()).unwrap();
    let far = 9.0 * delta * delta;
    let mut checked = 0;
    for l in 0..k.n_levels() {
        let t = k.times()[l];
        if t < far || t > 0.25 - far {
            continue;
        }
        for p in 0..g.n_nodes() {
            if cut.domain.node_distance(&g, p) >= 3.0 * delta {
                assert!((k.at(l, p, 0) - 1.0).abs() < 1e-12);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn thin_collar_is_rejected() {
    let (f, cut) = collar_setup(1.0 / 16.0, 1.0 / 16.0);
    assert!(matches!(k_eps(&f, 1.0 / 16.0, &cut, &MollifierSpec::default()), Err(Error::CollarTooThin { .. })));
}

#[test]
fn cutoff_gradients_are_bounded() {
    let g = grid1(1.0 / 512.0, 1.0, 0.5, BoundaryKind::Dirichlet);
    let cut = CutoffSpec { delta: 0.1, domain: Domain::interval(0.0, 1.0), t0: 0.0, t1: 1.0 };
    let (c1, c2) = cut.gradient_constants(&g);
    assert!(c1 <= 4.0 && c2 <= 4.0, "{c1} {c2}");
    assert!(c1 > 1.0 && c2 > 1.0);
    for p in 0..g.n_nodes() {
        let e = cut.eta1(&[g.coord(0, p)]);
        assert!((0.0..=1.0).contains(&e));
    }
    assert_eq!(cut.eta2(0.005), 0.0);
    assert_eq!(cut.eta2(0.5), 1.0);
    let dom = Domain::Graph {
        graph: GraphDomain { psi: GraphFunction::Cosine { amplitude: 0.1, k: 2.0 }, m_bound: 1.0, alpha: 1.0 },
        d: 2,
        half_width: 1.0,
        depth: 1.0,
    };
    let g2 = dom.grid(1.0 / 32.0, (0.0, 1.0), 0.5, 1).unwrap();
    let cut2 = CutoffSpec { delta: 0.15, domain: dom, t0: 0.0, t1: 1.0 };
    let (c1, _) = cut2.gradient_constants(&g2);
    assert!(c1 <= 4.0, "{c1}");
}

fn bump_field(h: f64) -> NodeField {
    let g = grid1(h, 0.0, 1.0, BoundaryKind::Dirichlet);
    NodeField::sample(&g, vec![0.0], 1, |x, _, o| o[0] = (-(x[0] - 0.5).powi(2) / 0.01).exp())
}

#[test]
fn unit_weight_reduces_to_young() {
    let f = bump_field(1.0 / 1024.0);
    for p in [2.0, 4.0] {
        let r = weighted_bound_check(&|_, _| 1.0, &f, 1.0 / 32.0, p, &MollifierSpec::default()).unwrap();
        assert!((r.g_average - 1.0).abs() < 1e-12);
        assert!(r.ratio <= 1.0 + 1e-10, "{r:?}");
    }
}

#[test]
fn oscillating_weight_ratio_is_stable() {
    let f = bump_field(1.0 / 1024.0);
    let g = |y: &[f64], _: f64| (2.0 * PI * y[0]).cos();
    let ratios: Vec<f64> = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0]
        .iter()
        .map(|&e| weighted_bound_check(&g, &f, e, 2.0, &MollifierSpec::default()).unwrap().ratio)
        .collect();
    let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
    assert!(hi <= 2.0, "{ratios:?}");
    assert!(hi <= 2.0 * lo, "{ratios:?}");
}

#[test]
fn gradient_variant_scales_inversely_with_eps() {
    // the witness oscillates on the kernel scale, period 4ε
    let g = |y: &[f64], _: f64| (2.0 * PI * y[0]).cos();
    let eps = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let vals: Vec<f64> = eps
        .iter()
        .map(|&e| {
            let grid = grid1(1.0 / 1024.0, 0.0, 1.0, BoundaryKind::Dirichlet);
            let f = NodeField::sample(&grid, vec![0.0], 1, |x, _, o| {
                o[0] = (-(x[0] - 0.5).powi(2) / 0.01).exp() * (PI * x[0] / (2.0 * e)).cos()
            });
            weighted_bound_check(&g, &f, e, 2.0, &MollifierSpec::default()).unwrap().grad_ratio
        })
        .collect();
    let x: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = vals.iter().map(|v| v.ln()).collect();
    let (slope, _) = fit_line(&x, &y);
    assert!((slope + 1.0).abs() <= 0.15, "{vals:?} slope {slope}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn smoothing_is_linear_and_contracting(seed in 0u64..1000, a in -3.0f64..3.0, eps_inv in 4u32..12) {
        let eps = 1.0 / eps_inv as f64;
        let g = grid1(1.0 / 64.0, 0.0, 1.0, BoundaryKind::Dirichlet);
        let f1 = random_field(&g, vec![0.0], seed);
        let f2 = random_field(&g, vec![0.0], seed + 1);
        let mut comb = f1.clone();
        for (c, (x, y)) in comb.data_mut().iter_mut().zip(f1.data().iter().zip(f2.data())) {
            *c = a * x + y;
        }
        let spec = MollifierSpec::default();
        let s1 = smooth(&f1, eps, &spec).unwrap();
        let s2 = smooth(&f2, eps, &spec).unwrap();
        let sc = smooth(&comb, eps, &spec).unwrap();
        for k in 0..sc.data().len() {
            prop_assert!((sc.data()[k] - a * s1.data()[k] - s2.data()[k]).abs() < 1e-12);
        }
        prop_assert!(lp_norm(&s1, 2.0) <= lp_norm(&f1, 2.0) * (1.0 + 1e-10));
        prop_assert!(lp_norm(&s1, 4.0) <= lp_norm(&f1, 4.0) * (1.0 + 1e-10));
    }

    #[test]
    fn smoothing_commutes_with_periodic_shifts(seed in 0u64..1000, shift in 1usize..63) {
        let g = grid1(1.0 / 64.0, 0.0, 1.0, BoundaryKind::Periodic);
        let f = random_field(&g, vec![0.0], seed);
        let n = g.n_nodes();
        let shifted_data: Vec<f64> = (0..n).map(|p| f.at(0, (p + shift) % n, 0)).collect();
        let fs = NodeField::from_data(&g, vec![0.0], 1, shifted_data).unwrap();
        let spec = MollifierSpec::default();
        let a = smooth(&f, 0.125, &spec).unwrap();
        let b = smooth(&fs, 0.125, &spec).unwrap();
        for p in 0..n {
            prop_assert!((b.at(0, p, 0) - a.at(0, (p + shift) % n, 0)).abs() < 1e-12);
        }
    }
}
