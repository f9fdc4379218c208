use hca_core::dynamics::dense::DenseSystem;
use hca_core::dynamics::{e_index, trace_norm, CMatrix, SingleSiteState};
use hca_core::hca::compile;
use hca_core::rtm::build::{builtin, BuildOptions};
use hca_core::verifier::*;
use hca_core::{Boundary, Error, Variant};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn diag(p: &[f64]) -> SingleSiteState {
    SingleSiteState::from_diag(p)
}

fn tape_instance(name: &str, variant: Variant, lattice: usize, m_cells: usize) -> DecisionInstance {
    let mut cells = vec!["M:00:s0".to_string(); m_cells];
    cells[m_cells - 1] = "M:01:s0".into();
    DecisionInstance {
        machine: MachineRef::Builtin {
            name: name.into(),
            variant,
            pad: 0,
        },
        boundary: Boundary::Periodic,
        ensemble: EnsembleSource::Tapes(vec![Tape { cells, weight: 1.0 }]),
        lattice,
        lattice_min: None,
        eta: 0.9,
        eps1: 0.1,
        gamma: 2.0,
        gap_floor: GapFloor::Exponential,
        t0_override: Some(64.0),
        max_steps: 100_000,
        dim_limit: 4096,
    }
}

#[test]
fn grid_step_from_thresholds() {
    let th = Thresholds { eta: 0.5, eps1: 0.25 };
    let g = make_grid(&th, 2.0, Horizon::Fixed(1.0)).unwrap();
    assert_eq!(g.dt, 1.0 / 32.0);
    assert_eq!(g.k, 32);
}

#[test]
fn cutoff_for_small_lattice() {
    assert_eq!(t0_log2(3, 1.0), 15.0);
    let th = Thresholds { eta: 0.5, eps1: 0.25 };
    let g = make_grid(
        &th,
        2.0,
        Horizon::Cutoff {
            lattice: 3,
            gamma: 1.0,
            t0_override: None,
        },
    )
    .unwrap();
    assert_eq!(g.horizon, 32768.0);
    assert_eq!(g.k, 32768 * 32);
    assert!(g.k as f64 * g.dt <= g.horizon);
    assert!(!g.overridden);
}

#[test]
fn cutoff_grid_stays_inside_horizon() {
    let th = Thresholds::new(0.84, 0.04).unwrap();
    for t0 in [10.0, 64.0, 100.3] {
        let g = make_grid(
            &th,
            2.0,
            Horizon::Cutoff {
                lattice: 4,
                gamma: 1.0,
                t0_override: Some(t0),
            },
        )
        .unwrap();
        assert!(g.overridden);
        assert!(g.t(g.k) <= t0 * (1.0 + 1e-12));
        assert!(g.t(g.k + 1) > t0);
    }
}

#[test]
fn invalid_thresholds_rejected() {
    for (eta, eps1) in [(0.5, 0.3), (1.0, 0.1), (0.4, 0.0), (0.2, 0.1)] {
        assert!(matches!(
            Thresholds::new(eta, eps1),
            Err(Error::InvalidThresholds(_))
        ));
    }
    // the grid only needs a positive margin
    let edge = Thresholds { eta: 0.5, eps1: 0.25 };
    assert!(edge.validate().is_err());
    assert!(make_grid(&edge, 2.0, Horizon::Fixed(1.0)).is_ok());
    let bad = Thresholds { eta: 0.5, eps1: 0.5 };
    assert!(make_grid(&bad, 2.0, Horizon::Fixed(1.0)).is_err());
}

#[test]
fn check_on_reference_states() {
    let th = Thresholds { eta: 0.5, eps1: 0.25 };
    let e1 = 1;
    assert!(!check_condition(&diag(&[0.0, 1.0, 0.0]), e1, &th, 0.01).unwrap());
    assert!(check_condition(&diag(&[0.0, 0.5, 0.5]), e1, &th, 0.01).unwrap());
    // LHS = 2x = eps1 + (5/4)(eta - eps1) = 0.5625 exactly
    let x = 0.28125;
    let s = diag(&[0.0, 1.0 - x, x]);
    assert_eq!(distance_to_e1(&s, e1), 0.5625);
    assert!(!check_condition(&s, e1, &th, 0.01).unwrap());
    let s = diag(&[0.0, 1.0 - x - 1e-9, x + 1e-9]);
    assert!(check_condition(&s, e1, &th, 0.01).unwrap());
}

#[test]
fn check_rejects_coarse_precision() {
    let th = Thresholds { eta: 0.5, eps1: 0.25 };
    let r = check_condition(&diag(&[0.0, 1.0]), 1, &th, 0.0625 + 1e-9);
    assert!(matches!(r, Err(Error::PrecisionViolation(_))));
    assert!(check_condition(&diag(&[0.0, 1.0]), 1, &th, 0.0625).is_ok());
}

#[test]
fn dyadic_rounding_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for bits in [3u32, 7, 12] {
        let m = CMatrix::from_fn(3, 3, |_, _| Complex64::new(rng.random(), rng.random()));
        let r = round_dyadic(&m, bits);
        let q = (bits as f64).exp2();
        for (a, b) in m.iter().zip(r.iter()) {
            assert!((a.re - b.re).abs() <= 0.5 / q);
            assert!((a.im - b.im).abs() <= 0.5 / q);
            assert_eq!((b.re * q).fract(), 0.0);
        }
    }
    assert!(bits_for(0.05) as f64 >= (1.0f64 / 0.05).log2());
}

#[test]
fn taylor_bound_substitution() {
    let th = Thresholds { eta: 0.5, eps1: 0.25 };
    assert_eq!(taylor_bound(3, &th), 2.5 * (1.0 / 64.0 + 0.25 / 16.0));
    let s = taylor_setup(1.5, 2.0, &th).unwrap();
    assert_eq!((s.n, s.order), (3, 18));
}

/// e^{-iHt} for real symmetric H via its own eigendecomposition.
fn expm_oracle(h: &DMatrix<f64>, t: f64) -> CMatrix {
    let e = nalgebra::SymmetricEigen::new(h.clone());
    let v = e.eigenvectors.map(c);
    let mut vd = v.clone();
    for k in 0..h.nrows() {
        let ph = Complex64::from_polar(1.0, -e.eigenvalues[k] * t);
        for r in 0..h.nrows() {
            vd[(r, k)] *= ph;
        }
    }
    vd * v.transpose()
}

fn op_norm(m: &CMatrix) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

#[test]
fn taylor_tail_below_bound_chain() {
    // ‖tH‖ ≤ N ⇒ ‖T_{2N²}(-itH) - e^{-itH}‖ ≤ 2^{-(N²-N)}
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 2u64..=6 {
        for _ in 0..5 {
            let dim = 6;
            let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
            let h = &a + a.transpose();
            let norm = nalgebra::SymmetricEigen::new(h.clone())
                .eigenvalues
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()));
            let t = n as f64 / norm;
            let approx = taylor_matrix(&h, t, (2 * n * n) as usize);
            let err = op_norm(&(approx - expm_oracle(&h, t)));
            let bound = (-((n * n - n) as f64)).exp2();
            assert!(err <= bound.max(1e-13), "N = {n}: {err:e} > {bound:e}");
        }
    }
}

#[test]
fn scalar_truncation_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        // |z| ≤ 10 keeps the direct sum itself accurate
        let z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-10.0..10.0));
        let m = rng.random_range(1..120usize);
        let mut term = c(1.0);
        let mut direct = c(1.0);
        for k in 1..=m {
            term *= z / k as f64;
            direct += term;
        }
        let got = truncated_exp(z, m);
        assert!((got - direct).norm() <= 1e-11 * (1.0 + direct.norm()), "z = {z}, m = {m}");
    }
    for _ in 0..50 {
        let z = Complex64::new(0.0, rng.random_range(-200.0..200.0));
        let got = truncated_exp(z, (2.0 * z.norm() * z.norm()) as usize + 50);
        assert!((got - z.exp()).norm() < 1e-12);
    }
    assert_eq!(truncated_exp(c(0.0), 0), c(1.0));
}

fn prepared(name: &str, variant: Variant, lattice: usize, m: usize) -> Prepared {
    prepare(&tape_instance(name, variant, lattice, m), None).unwrap()
}

#[test]
fn truncated_evolution_at_time_zero_is_identity() {
    let p = prepared("halt_now", Variant::OneWay, 3, 2);
    let ens = p.instance.ensemble.build(&p.spec, 3, Boundary::Periodic).unwrap();
    let x = &ens.members[0].0;
    let sys = DenseSystem::new(&p.h, std::slice::from_ref(x), 4096).unwrap();
    let psi = sys.basis_vector(x).unwrap();
    let th = p.instance.thresholds().unwrap();
    let r = truncated_evolution(&sys, &psi, 0.0, 64.0, &th, 0.0).unwrap();
    assert_eq!(r.state, psi);
}

#[test]
fn truncated_evolution_within_bound_on_small_lattice() {
    let p = prepared("halt_now", Variant::OneWay, 3, 2);
    let th = p.instance.thresholds().unwrap();
    let ens = p.instance.ensemble.build(&p.spec, 3, Boundary::Periodic).unwrap();
    let x = &ens.members[0].0;
    let sys = DenseSystem::new(&p.h, std::slice::from_ref(x), 4096).unwrap();
    let psi = sys.basis_vector(x).unwrap();
    let t0 = 64.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let t = rng.random_range(0.0..t0);
        let r = truncated_evolution(&sys, &psi, t, t0, &th, 0.0).unwrap();
        let exact = expm_oracle(&sys.h, t) * &psi;
        let err = pure_distance(&r.state, &exact);
        assert!(err <= r.setup.bound, "{err:e}");
        assert!(err < 1e-9, "{err:e} at t = {t}");
    }
    assert!(matches!(
        truncated_evolution(&sys, &psi, t0 + 1.0, t0, &th, 0.0),
        Err(Error::ToleranceViolation(_))
    ));
    assert!(matches!(
        truncated_evolution(&sys, &psi, 1.0, t0, &th, 1.0),
        Err(Error::ToleranceViolation(_))
    ));
}

#[test]
fn pure_distance_matches_trace_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let a = DVector::from_fn(4, |_, _| Complex64::new(rng.random(), rng.random()));
        let b = DVector::from_fn(4, |_, _| Complex64::new(rng.random(), rng.random()));
        let m = &a * a.adjoint() - &b * b.adjoint();
        assert!((pure_distance(&a, &b) - trace_norm(&m)).abs() < 1e-10);
    }
}

#[test]
fn finite_procedure_on_halting_fixture() {
    let p = prepared("halt_now", Variant::OneWay, 5, 2);
    let d = decide_finite(&p).unwrap();
    assert_eq!(d.verdict, Verdict::Yes);
    assert!(d.max_taylor_error <= d.taylor_bound);
    let names: Vec<_> = d.ledger.iter().map(|t| t.name).collect();
    for n in ["grid_discretization", "entry_rounding", "taylor_truncation", "time_cutoff"] {
        assert!(names.contains(&n), "{n}");
    }
}

#[test]
fn finite_procedure_on_non_halting_fixture() {
    let p = prepared("ping_pong", Variant::OneWay, 5, 2);
    let d = decide_finite(&p).unwrap();
    assert_eq!(d.verdict, Verdict::No);
    assert_eq!(d.fired_at, None);
}

#[test]
fn small_orbit_gap_is_reported() {
    let mut i = tape_instance("halt_now", Variant::Iid, 5, 2);
    i.gamma = 1.0;
    let p = prepare(&i, None).unwrap();
    match decide_finite(&p) {
        Err(Error::GapViolation { measured, floor }) => {
            assert_eq!(floor, 1.0 / 32.0);
            assert!(measured < floor);
        }
        other => panic!("expected a gap violation, got {other:?}"),
    }
}

#[test]
fn semi_decision_outcomes() {
    let p = prepared("halt_now", Variant::OneWay, 5, 2);
    assert!(matches!(semi_decide(&p, 5000).unwrap(), SemiOutcome::Accepted { lattice: 5, .. }));
    assert_eq!(
        semi_decide(&p, 0).unwrap(),
        SemiOutcome::BudgetExhausted { examined: 0 }
    );
    let q = prepared("ping_pong", Variant::OneWay, 5, 2);
    for budget in [1, 10, 700] {
        assert_eq!(
            semi_decide(&q, budget).unwrap(),
            SemiOutcome::BudgetExhausted { examined: budget }
        );
    }
}

#[test]
fn diagonal_order() {
    let got: Vec<_> = diagonal_pairs(2, 4).take(9).collect();
    assert_eq!(
        got,
        vec![(1, 2), (1, 3), (2, 2), (1, 4), (2, 3), (3, 2), (2, 4), (3, 3), (4, 2)]
    );
    // every pair shows up exactly once
    let many: Vec<_> = diagonal_pairs(1, 3).take(300).collect();
    let set: std::collections::HashSet<_> = many.iter().collect();
    assert_eq!(set.len(), many.len());
    assert!(many.iter().all(|&(k, l)| k >= 1 && (1..=3).contains(&l)));
}

#[test]
fn oracle_state_is_a_density_matrix() {
    let p = prepared("halt_now", Variant::TwoWay, 4, 2);
    let (o, s) = longterm_oracle(&p, 4).unwrap();
    s.validate(1e-10, 1e-10, 1e-10).unwrap();
    assert!((o.state_trace - 1.0).abs() < 1e-10);
}

/// Finite-T time average (1/T)∫₀^T of the site state, in closed form from
/// the eigendecomposition.
fn finite_average(sys: &DenseSystem, psi: &DVector<Complex64>, t: f64, d: usize) -> CMatrix {
    let n = sys.dim();
    let v = sys.eigenvectors.map(c);
    let coeff = v.transpose() * psi;
    let mut rho = CMatrix::zeros(n, n);
    for k in 0..n {
        for l in 0..n {
            let w = sys.eigenvalues[k] - sys.eigenvalues[l];
            let f = if w.abs() < 1e-9 {
                c(1.0)
            } else {
                (c(1.0) - Complex64::from_polar(1.0, -w * t)) / Complex64::new(0.0, w * t)
            };
            let z = coeff[k] * coeff[l].conj() * f;
            if z.norm() == 0.0 {
                continue;
            }
            rho += v.column(k) * v.column(l).transpose() * z;
        }
    }
    sys.site_average_mixed(&rho, d).m
}

#[test]
fn cutoff_error_below_gap_floor_term() {
    // formula T0 at L = 3, gamma = 2; orbit gap is far above 2^{-9}
    let p = prepared("halt_now", Variant::OneWay, 3, 2);
    let ens = p.instance.ensemble.build(&p.spec, 3, Boundary::Periodic).unwrap();
    let x = &ens.members[0].0;
    let sys = DenseSystem::new(&p.h, std::slice::from_ref(x), 4096).unwrap();
    let psi = sys.basis_vector(x).unwrap();
    let d = p.spec.site_dim();
    let t0 = t0_log2(3, 2.0).exp2();
    let inf = sys.site_average_mixed(&sys.infinite_time_average(&psi), d).m;
    let fin = finite_average(&sys, &psi, t0, d);
    assert!(trace_norm(&(inf - fin)) <= (-9.0f64).exp2());
}

#[test]
fn grid_spacing_bounds_discretization() {
    let p = prepared("halt_now", Variant::OneWay, 5, 2);
    let th = p.instance.thresholds().unwrap();
    let grid = make_grid(&th, NORM_H_BOUND, Horizon::Fixed(20.0)).unwrap();
    let ens = p.instance.ensemble.build(&p.spec, 5, Boundary::Periodic).unwrap();
    let x = &ens.members[0].0;
    let sys = DenseSystem::new(&p.h, std::slice::from_ref(x), 4096).unwrap();
    let psi = sys.basis_vector(x).unwrap();
    let d = p.spec.site_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let i = rng.random_range(0..grid.k);
        let t = grid.t(i) + rng.random_range(0.0..grid.dt);
        let a = sys.site_average_pure(&sys.evolve(&psi, grid.t(i)), d).m;
        let b = sys.site_average_pure(&sys.evolve(&psi, t), d).m;
        worst = worst.max(trace_norm(&(a - b)));
    }
    assert!(worst <= th.gap() / 2.0, "{worst}");
}

#[test]
fn reduction_parameter_substitution() {
    let a = CMatrix::from_diagonal(&DVector::from_vec(vec![c(0.0), c(1.0), c(-1.0)]));
    let r = reduction_parameters(&a, 1, 2, 0.5).unwrap();
    assert_eq!(r.c1, 1.0);
    assert!((r.eps1 - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.eps0 - 1.0 / 3.0).abs() < 1e-15);
    let id = CMatrix::identity(3, 3);
    assert_eq!(reduction_parameters(&id, 1, 2, 0.5), Err(Error::DegenerateObservable));
}

fn random_density(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
    let g = CMatrix::from_fn(d, d, |_, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let m = &g * g.adjoint();
    let tr = m.trace();
    m / tr
}

/// A state at trace distance exactly `r` from `center` (r ≤ what the
/// mixing direction allows).
fn ball_state(rng: &mut ChaCha8Rng, center: &CMatrix, r: f64) -> CMatrix {
    let d = center.nrows();
    loop {
        let sigma = random_density(rng, d);
        let dist = trace_norm(&(&sigma - center));
        if dist < 1e-9 {
            continue;
        }
        let s = r / dist;
        if s <= 1.0 {
            return center * c(1.0 - s) + sigma * c(s);
        }
    }
}

#[test]
fn reduction_separation_on_sampled_balls() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let d = 4;
    for _ in 0..1000 {
        let g = CMatrix::from_fn(d, d, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let a = (&g + g.adjoint()) * c(0.5);
        let eta = rng.random_range(0.05..0.95);
        let r = reduction_parameters(&a, 1, 2, eta).unwrap();
        let mut e1 = CMatrix::zeros(d, d);
        e1[(1, 1)] = c(1.0);
        let mut mix = CMatrix::zeros(d, d);
        mix[(1, 1)] = c(1.0 - eta);
        mix[(2, 2)] = c(eta);
        let u1 = rng.random::<f64>() * r.eps1;
        let s1 = ball_state(&mut rng, &e1, u1);
        let u2 = rng.random::<f64>() * r.eps1;
        let s2 = ball_state(&mut rng, &mix, u2);
        let tr1 = (&s1 * &a).trace().re;
        let tr2 = (&s2 * &a).trace().re;
        assert!((tr1 - r.c1).abs() <= r.eps0 + 1e-12);
        assert!((tr1 - tr2).abs() >= r.eps0 - 1e-12);
    }
}

#[test]
fn reduction_first_inequality_needs_the_e1_ball() {
    // tr σ₂A sits η|A11 - A22| away from c1 at the centre of the σ₂ ball
    let a = CMatrix::from_diagonal(&DVector::from_vec(vec![c(0.0), c(1.0), c(-1.0)]));
    let eta = 0.5;
    let r = reduction_parameters(&a, 1, 2, eta).unwrap();
    let mix = CMatrix::from_diagonal(&DVector::from_vec(vec![c(0.0), c(1.0 - eta), c(eta)]));
    let off = ((&mix * &a).trace().re - r.c1).abs();
    assert!((off - 1.0).abs() < 1e-12);
    assert!(off > r.eps0);
}

#[test]
fn rotation_by_e1_is_identity() {
    let spec = builtin("halt_now", Variant::TwoWay, BuildOptions::default()).unwrap();
    let h = compile(&spec, Boundary::Periodic).unwrap();
    let d = spec.site_dim();
    let (e0, e1) = (e_index(&spec, 0).unwrap(), e_index(&spec, 1).unwrap());
    let mut psi = DVector::zeros(d);
    psi[e1] = c(1.0);
    let terms = LocalTerms::from_hamiltonian(&h);
    let r = rotate_instance(&terms, &psi, e0, e1, 0.1).unwrap();
    assert_eq!(r.v, CMatrix::identity(d, d));
    let mut a = terms.pair.clone();
    a.sort_by_key(|t| (t.0, t.1));
    assert_eq!(r.terms.pair, a);
}

#[test]
fn rotation_rejects_bad_targets() {
    let spec = builtin("halt_now", Variant::TwoWay, BuildOptions::default()).unwrap();
    let h = compile(&spec, Boundary::Periodic).unwrap();
    let terms = LocalTerms::from_hamiltonian(&h);
    let d = spec.site_dim();
    let (e0, e1, e3) = (
        e_index(&spec, 0).unwrap(),
        e_index(&spec, 1).unwrap(),
        e_index(&spec, 3).unwrap(),
    );
    let mut psi = DVector::zeros(d);
    psi[e1] = c(0.99);
    psi[e0] = c(0.141);
    assert!(matches!(
        rotate_instance(&terms, &psi, e0, e1, 0.5),
        Err(Error::OverlapViolation(_))
    ));
    let mut psi = DVector::zeros(d);
    psi[e1] = c(0.6);
    psi[e3] = c(0.8);
    assert!(matches!(
        rotate_instance(&terms, &psi, e0, e1, 0.1),
        Err(Error::OverlapViolation(_))
    ));
}

#[test]
fn local_terms_reproduce_dense_hamiltonian() {
    let spec = builtin("halt_now", Variant::TwoWay, BuildOptions::default()).unwrap();
    let h = compile(&spec, Boundary::Periodic).unwrap();
    let terms = LocalTerms::from_hamiltonian(&h);
    let cells = [spec.parse_cell("M:01:s0").unwrap(), spec.fresh_a(), spec.fresh_a(), spec.fresh_a()];
    let x = spec.initial_config(&cells, Boundary::Periodic);
    let sys = DenseSystem::new(&h, std::slice::from_ref(&x), 4096).unwrap();
    let seed: Vec<usize> = x.sites.iter().map(|&s| spec.site_index(s)).collect();
    let (basis, hd) = dense_closure(&terms, &[seed], 4096).unwrap();
    assert_eq!(basis.len(), sys.dim());
    for (a, xa) in basis.iter().enumerate() {
        let ca = config_from_indices(&spec, xa, Boundary::Periodic);
        let ia = sys.index[&ca];
        for (b, xb) in basis.iter().enumerate() {
            let ib = sys.index[&config_from_indices(&spec, xb, Boundary::Periodic)];
            assert_eq!(hd[(a, b)], c(sys.h[(ia, ib)]));
        }
    }
}

#[test]
fn rotated_dynamics_round_trip() {
    let spec = builtin("halt_now", Variant::TwoWay, BuildOptions::default()).unwrap();
    let h = compile(&spec, Boundary::Periodic).unwrap();
    let terms = LocalTerms::from_hamiltonian(&h);
    let d = spec.site_dim();
    let (e0, e1, e3) = (
        e_index(&spec, 0).unwrap(),
        e_index(&spec, 1).unwrap(),
        e_index(&spec, 3).unwrap(),
    );
    let eps1 = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cells = [
        spec.parse_cell("M:01:s0").unwrap(),
        spec.fresh_a(),
        spec.fresh_a(),
        spec.fresh_a(),
    ];
    let x = spec.initial_config(&cells, Boundary::Periodic);
    let x_idx: Vec<usize> = x.sites.iter().map(|&s| spec.site_index(s)).collect();
    for _ in 0..3 {
        // ψ' = cos θ e1 + e^{iφ} sin θ e3 with ‖ψ'ψ'† - e1e1†‖₁ = 2 sin θ ≤ eps1
        let theta = rng.random_range(0.0..(eps1 / 2.0f64).asin());
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let mut psi = DVector::zeros(d);
        psi[e1] = c(theta.cos());
        psi[e3] = Complex64::from_polar(theta.sin(), phi);
        let rot = rotate_instance(&terms, &psi, e0, e1, eps1).unwrap();
        let v = &rot.v;
        assert!((v.adjoint() * v - CMatrix::identity(d, d)).norm() < 1e-12);

        // direct: product state with e1 under H = V†H'V
        let (basis, hm) = dense_closure(&rot.terms, std::slice::from_ref(&x_idx), 1 << 14).unwrap();
        let mut start = DVector::zeros(basis.len());
        start[0] = c(1.0);
        // primed: V^{⊗}|x> under H'
        let choices: Vec<Vec<usize>> = x_idx
            .iter()
            .map(|&s| if s == e1 { vec![e1, e3] } else { vec![s] })
            .collect();
        let support = product_support(&choices);
        let site_vecs: Vec<DVector<Complex64>> = x_idx.iter().map(|&s| v.column(s).into_owned()).collect();
        let amps = product_amplitudes(&support, &site_vecs);
        let (pbasis, hp) = dense_closure(&terms, &support, 1 << 14).unwrap();
        let mut pstart = DVector::zeros(pbasis.len());
        for (k, a) in amps.iter().enumerate() {
            pstart[k] = *a;
        }
        for _ in 0..4 {
            let t = rng.random_range(0.0..20.0);
            let direct = site_average_vector(&basis, &evolve_dense(&hm, &start, t), d);
            let primed = site_average_vector(&pbasis, &evolve_dense(&hp, &pstart, t), d);
            let back = v.adjoint() * &primed * v;
            assert!(trace_norm(&(&back - &direct)) <= 1e-10);
            // distance inflation against sigma = e1e1†
            let mut sigma = CMatrix::zeros(d, d);
            sigma[(e1, e1)] = c(1.0);
            let lhs = trace_norm(&(&primed - &sigma));
            let rhs = trace_norm(&(&direct - &sigma)) + 2f64.sqrt() * eps1;
            assert!(lhs <= rhs + 1e-12);
        }
    }
}

#[test]
fn instance_json_round_trip() {
    let i = tape_instance("halt_now", Variant::OneWay, 4, 2);
    let s = serde_json::to_string(&i).unwrap();
    let j = DecisionInstance::from_json_str(&s).unwrap();
    assert_eq!(serde_json::to_string(&j).unwrap(), s);
    assert!(matches!(
        DecisionInstance::from_json_str("{\"machine\": 3}"),
        Err(Error::Parse(_))
    ));
}

#[test]
fn missing_machine_file() {
    let r = MachineRef::File("no/such/machine.json".into()).resolve(None);
    match r {
        Err(Error::Parse(m)) => assert!(m.contains("machine spec not found")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn product_ensemble_instance() {
    let mut i = tape_instance("halt_now", Variant::OneWay, 3, 1);
    i.ensemble = EnsembleSource::Product {
        v: "1".into(),
        alpha: "1/4".into(),
        l: None,
        eps_amp: 0.0,
        samples: None,
        seed: 0,
    };
    let p = prepare(&i, None).unwrap();
    let ens = i.ensemble.build(&p.spec, 3, Boundary::Periodic).unwrap();
    assert!((ens.total_weight() - 1.0).abs() < 1e-12);
    // the all-A member carries (1 - α)³
    let all_a = ens
        .members
        .iter()
        .find(|(x, _)| x.cells().all(|cl| !cl.is_m()))
        .unwrap();
    assert!((all_a.1 - 27.0 / 64.0).abs() < 1e-12);
    let (o, _) = longterm_oracle(&p, 3).unwrap();
    assert!(o.distance.is_finite());
}
