use hca_core::encoding::*;
use hca_core::rtm::build::{builtin, BuildOptions};
use hca_core::*;
use num_bigint::BigInt;
use num_traits::{One, Zero};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn r(n: i64, d: i64) -> Rat {
    Rat::new(BigInt::from(n), BigInt::from(d))
}

fn spec() -> MachineSpec {
    builtin("halt_now", Variant::OneWay, BuildOptions::default()).unwrap()
}

fn bits(k: u32, len: usize) -> String {
    (0..len).rev().map(|i| if (k >> i) & 1 == 1 { '1' } else { '0' }).collect()
}

/// Every bit string of length 1..=max ending in 1.
fn codewords(max: usize) -> Vec<String> {
    let mut out = Vec::new();
    for len in 1..=max {
        for k in 0..(1u32 << len) {
            if k & 1 == 1 {
                out.push(bits(k, len));
            }
        }
    }
    out
}

#[test]
fn encoding_examples() {
    let e = encode_input("101").unwrap();
    assert_eq!(e.beta, r(5, 8));
    assert_eq!(e.marker, r(1, 9));
    let [a0, a1] = e.track2_amplitudes();
    assert!((a0 - (8.0f64 / 9.0).sqrt()).abs() < 1e-15);
    assert!((a1 - (1.0f64 / 9.0).sqrt()).abs() < 1e-15);
    let [b0, b1] = e.track1_amplitudes();
    assert!((b0 * b0 - 3.0 / 8.0).abs() < 1e-15 && (b1 * b1 - 5.0 / 8.0).abs() < 1e-15);
    assert_eq!(encode_input("1").unwrap().beta, r(1, 2));
    for bad in ["10", "", "1a1"] {
        assert!(matches!(encode_input(bad), Err(Error::PromiseViolated(_))));
    }
    // alpha = (eps1/4)^2
    assert_eq!(e.alpha, r(1, 256));
    assert_eq!(alpha_from_eps1(&r(1, 8)), r(1, 1024));
}

#[test]
fn zero_rate_gives_a_single_configuration() {
    let s = spec();
    let enc = encode_input("1").unwrap().with_alpha(Rat::zero());
    let ens = build_initial_ensemble(&s, &EnsembleParams::anchored(4).overridden(), &enc, 0.0).unwrap();
    let ex = ens.exact.unwrap();
    assert_eq!(ex.members.len(), 1);
    assert_eq!(ex.exact.unwrap(), [Rat::one()]);
    let c = &ex.members[0].0;
    assert_eq!(s.config_tags(c), ["m0:q1_init", "A:a1", "A:a1", "A:a1", "A:a1"]);
}

#[test]
fn product_measure_weights() {
    let s = spec();
    let enc = encode_input("101").unwrap().with_alpha(r(1, 4));
    let ens = build_initial_ensemble(&s, &EnsembleParams::anchored(3).overridden(), &enc, 0.0).unwrap();
    assert_eq!(ens.exact_total().unwrap(), Rat::one());
    assert!(ens.discarded.is_zero());
    let ex = ens.exact.as_ref().unwrap();
    assert_eq!(ex.members.len(), 5usize.pow(3));
    let no_m: Rat = ex
        .members
        .iter()
        .zip(ex.exact.as_ref().unwrap())
        .filter(|((c, _), _)| c.cells().all(|x| !x.is_m()))
        .map(|(_, w)| w.clone())
        .fold(Rat::zero(), |a, b| a + b);
    assert_eq!(no_m, r(27, 64));
    assert!(!ens.violations.is_empty());
    assert_eq!(ex.meta.violations, ens.violations);
    // i.i.d. weights also sum to one
    let iid = build_initial_ensemble(&s, &EnsembleParams::iid(3, 2).overridden(), &enc, 0.0).unwrap();
    assert_eq!(iid.exact_total().unwrap(), Rat::one());
    assert_eq!(iid.exact.unwrap().members.len(), 6usize.pow(4));
}

#[test]
fn truncation_records_dropped_mass() {
    let s = spec();
    let enc = encode_input("101").unwrap().with_alpha(r(1, 4));
    let ens = build_initial_ensemble(&s, &EnsembleParams::anchored(3).overridden(), &enc, 1e-3).unwrap();
    let kept = ens.exact_total().unwrap();
    assert!(!ens.discarded.is_zero());
    assert_eq!(kept + ens.discarded.clone(), Rat::one());
}

#[test]
fn size_constraints_are_enforced_unless_overridden() {
    let s = spec();
    let enc = encode_input("101").unwrap();
    let p = EnsembleParams::anchored(3);
    assert!(matches!(
        build_initial_ensemble(&s, &p, &enc, 0.0),
        Err(Error::ParamsViolation(_))
    ));
    let v = param_violations(&p, &enc);
    assert_eq!(v.len(), 2, "{v:?}");
    let th = thresholds(&p, &enc);
    assert_eq!(th.n0, Rat::from_integer(BigInt::from(1024)));
    assert_eq!(th.l0, BigInt::from(54));
    let iid = thresholds(&EnsembleParams::iid(100, 3), &enc);
    assert_eq!(iid.l0, BigInt::from(3).pow(11));
    assert_eq!(iid.block_min, Some(BigInt::from(729)));
    assert!(matches!(
        build_initial_ensemble(&s, &EnsembleParams { l: None, ..EnsembleParams::iid(5, 2) }.overridden(), &enc, 0.0),
        Err(Error::ParamsViolation(_))
    ));
}

#[test]
fn large_support_falls_back_to_sampling() {
    let s = spec();
    let enc = encode_input("11").unwrap().with_alpha(r(1, 4));
    let ens = build_initial_ensemble(&s, &EnsembleParams::anchored(40).overridden(), &enc, 0.0).unwrap();
    assert!(ens.exact.is_none());
    let a = ens.members_or_sample(50, 9);
    let b = ens.members_or_sample(50, 9);
    assert_eq!(a.members, b.members);
    assert_eq!(a.members.len(), 50);
    let js = ens.to_json(&s, Some(9));
    assert!(js["members"].is_null());
    assert_eq!(js["sampler"]["seed"], 9);
}

#[test]
fn sampling_is_deterministic_and_unbiased() {
    let s = spec();
    let enc = encode_input("101").unwrap().with_alpha(r(1, 4));
    let ens = build_initial_ensemble(&s, &EnsembleParams::anchored(30).overridden(), &enc, 0.0).unwrap();
    let a = sample_configs(&ens, 100_000, 17);
    let b = sample_configs(&ens, 100_000, 17);
    assert_eq!(a, b);
    assert_ne!(a, sample_configs(&ens, 100_000, 18));
    // per-site M-cell frequency 0.25 within 0.005 (about 3.7 sigma)
    for site in [1, 7, 30] {
        let m = a.iter().filter(|c| c.sites[site].cell().is_some_and(|x| x.is_m())).count();
        let f = m as f64 / a.len() as f64;
        assert!((f - 0.25).abs() < 0.005, "site {site}: {f}");
    }
    assert!(a.iter().all(|c| c.sites[0] == Site::Ctrl { mode: s.rw_mode(), q: s.initial }));
}

#[test]
fn rate_window_deviations_stay_below_the_chernoff_envelope() {
    let s = spec();
    let enc = encode_input("101").unwrap().with_alpha(r(1, 64));
    for lattice in [1usize << 12, 1 << 15] {
        let ens = build_initial_ensemble(&s, &EnsembleParams::anchored(lattice).overridden(), &enc, 0.0).unwrap();
        let samples = if lattice > 5000 { 300 } else { 2000 };
        let draws = sample_configs(&ens, samples, 5);
        let out = draws
            .iter()
            .filter(|c| {
                let m = c.cells().filter(|x| x.is_m()).count();
                !rate_window_ok(m, lattice, 1.0 / 64.0)
            })
            .count();
        let p = 0.25 * (lattice as f64).powf(-1.0 / 3.0);
        let slack = 3.0 * (p * (1.0 - p) / samples as f64).sqrt();
        assert!((out as f64 / samples as f64) <= p + slack);
    }
}

#[test]
fn block_lengths_are_geometric() {
    for l in [3usize, 10] {
        let mut rng = ChaCha8Rng::seed_from_u64(l as u64);
        let n = 200_000;
        let xs: Vec<u64> = (0..n).map(|_| sample_block_length(&mut rng, l)).collect();
        let mean = xs.iter().sum::<u64>() as f64 / n as f64;
        let l2 = (l * l) as f64;
        assert!((mean - l2).abs() / l2 < 0.02, "l={l}: mean {mean}");
        // P(len <= l - 1) = 1 - (1 - l^-2)^(l-1) <= l^-1
        let short = xs.iter().filter(|&&x| x < l as u64).count() as f64 / n as f64;
        let exact = 1.0 - (1.0 - 1.0 / l2).powi(l as i32 - 1);
        let sd = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((short - exact).abs() < 4.0 * sd + 1e-12);
        assert!(exact <= 1.0 / l as f64);
    }
}

#[test]
fn classify_examples() {
    assert!(rate_window_ok(16, 64, 0.25));
    assert!(!rate_window_ok(0, 64, 0.3));
    let s = spec();
    let a = Site::Cell(s.fresh_a());
    let ctl = Site::Ctrl { mode: s.rw_mode(), q: s.initial };
    let enc = encode_input("11").unwrap().with_alpha(r(3, 10));
    let mut sites = vec![ctl];
    sites.extend(std::iter::repeat_n(a, 64));
    let all_a = Configuration::new(sites, Boundary::Periodic);
    let v = classify_good(&all_a, &EnsembleParams::anchored(64).overridden(), &enc, None);
    assert!(!v.good);
    assert!(v.reasons.contains(&Condition::RateWindow));
    assert!(v.reasons.contains(&Condition::Decode));

    // a tape that decodes: two marker zeros, then a one; 256 track-1 bits
    // with frequency exactly 3/4
    let enc = encode_input("11").unwrap().with_alpha(r(1, 2));
    let mut sites = vec![ctl];
    for i in 0..256 {
        let b2 = i == 2;
        let b1 = i % 4 != 0;
        sites.push(Site::Cell(s.fresh_m(b1, b2)));
        sites.push(a);
    }
    let good = Configuration::new(sites, Boundary::Periodic);
    let v = classify_good(&good, &EnsembleParams::anchored(512).overridden(), &enc, None);
    assert!(v.good, "{v:?}");
}

#[test]
fn short_blocks_fail_block_length() {
    let s = spec();
    let l = 4;
    let enc = encode_input("0011").unwrap().with_alpha(r(1, 4));
    let ctl = Site::Ctrl { mode: s.rw_mode(), q: s.initial };
    let a = Site::Cell(s.fresh_a());
    let mut sites = Vec::new();
    for _ in 0..8 {
        sites.push(ctl);
        sites.extend(std::iter::repeat_n(a, l - 2));
    }
    let c = Configuration::new(sites, Boundary::Periodic);
    assert!(c.blocks().iter().all(|(_, b)| b.len() == l - 1));
    let v = classify_good(&c, &EnsembleParams::iid(c.len() - 1, l).overridden(), &enc, None);
    assert!(v.reasons.contains(&Condition::BlockLength), "{v:?}");
    assert_eq!(v.bad_sites, c.len());
}

#[test]
fn recover_examples() {
    assert_eq!(recover_beta(&r(5, 8), 5).unwrap(), "101");
    assert_eq!(recover_beta(&(r(3, 4) - r(1, 64)), 4).unwrap(), "11");
    assert_eq!(recover_beta(&r(31, 64), 2).unwrap(), "1");
    // exactly on the window edge
    assert!(matches!(recover_beta(&r(5, 8), 2), Err(Error::NoValidCodeword)));
    assert!(matches!(recover_beta(&r(1, 100), 3), Err(Error::NoValidCodeword)));
    assert!(matches!(recover_beta(&r(1, 2), 0), Err(Error::NoValidCodeword)));
}

#[test]
fn recover_round_trip() {
    for v in codewords(12) {
        let beta = beta_of(&v);
        for np in v.len()..=v.len() + 4 {
            assert_eq!(recover_beta(&beta, np).unwrap(), v, "n'={np}");
            // anything strictly inside the window decodes the same
            let nudge = Rat::new(BigInt::one(), BigInt::one() << (np + 3));
            assert_eq!(recover_beta(&(&beta + &nudge), np).unwrap(), v);
            assert_eq!(recover_beta(&(&beta - &nudge), np).unwrap(), v);
        }
    }
}

#[test]
fn decode_stream_reads_marker_then_frequency() {
    let enc = encode_input("11").unwrap();
    let mut stream = vec![(true, false), (true, false), (false, true)];
    stream.extend((3..256).map(|i| (i % 4 != 0, false)));
    let out = decode_stream(&stream, &enc, None);
    assert_eq!(out.n_prime, Some(2));
    assert_eq!(out.beta_prime, Some(r(3, 4)));
    assert!(out.ok);
    // no marker and no tail: fail
    let none = decode_stream(&[(true, false); 10], &enc, None);
    assert!(!none.ok && none.n_prime.is_none());
    // too short and no tail: fail; with a tail the rest is drawn
    let short = decode_stream(&stream[..20], &enc, None);
    assert!(!short.ok);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tailed = decode_stream(&stream[..20], &enc, Some(&mut rng));
    assert_eq!(tailed.n_prime, Some(2));
}

#[test]
fn bound_substitutions() {
    let enc = |v: &str| encode_input(v).unwrap();
    let v64 = format!("{}1", "0".repeat(63));
    let p = EnsembleParams::anchored(10).overridden();
    assert_eq!(good_rate_bounds(&p, &enc(&v64)).unwrap(), r(1, 32));
    let v1000 = format!("{}1", "0".repeat(999));
    assert_eq!(good_rate_bounds(&p, &enc(&v1000)).unwrap(), r(1, 500));
    let iid = EnsembleParams::iid(1 << 20, 2).overridden();
    assert_eq!(good_rate_bounds(&iid, &enc("1")).unwrap(), r(5, 1024));
    assert!(good_rate_bounds(&EnsembleParams::anchored(10), &enc(&v64)).is_err());
}

#[test]
fn block_target_and_moments() {
    assert_eq!(block_target(2, 1 << 20), ((3.0 / 16.0) * (1u64 << 20) as f64) as usize);
    let enc = encode_input("11").unwrap().with_alpha(r(1, 4));
    let (m, v) = bad_block_moments(2, &enc);
    assert!(m > 0.0 && v >= 0.0);
    let p = rate_pass_probability(64, &enc);
    assert!(p > 0.0 && p <= 1.0);
}

#[test]
fn bad_rate_estimates_are_seeded() {
    let v64 = format!("{}1", "0".repeat(63));
    let enc = encode_input(&v64).unwrap().with_alpha(r(1, 16));
    let p = EnsembleParams::anchored(1 << 12).overridden();
    let a = estimate_bad_rate(&p, &enc, 2000, 3).unwrap();
    let b = estimate_bad_rate(&p, &enc, 2000, 3).unwrap();
    assert_eq!(a.bad, b.bad);
    assert_eq!(a.samples, 2000);
    assert!((a.bound - 1.0 / 32.0).abs() < 1e-15);
}

#[test]
fn phase_decode_examples() {
    let d = phase_decode(&r(1, 2), 3).unwrap();
    assert_eq!((d.len, d.v.as_str()), (1, "1"));
    let d = phase_decode(&r(5, 8), 5).unwrap();
    assert_eq!((d.len, d.v.as_str()), (3, "101"));
    let d = phase_decode(&r(3, 4), 8).unwrap();
    assert_eq!((d.len, d.v.as_str()), (2, "11"));
    assert!(matches!(phase_decode(&r(5, 8), 2), Err(Error::OraclePromiseViolated(_))));
    assert!(matches!(phase_decode(&r(1, 3), 4), Err(Error::OraclePromiseViolated(_))));
    assert!(matches!(phase_decode(&Rat::one(), 4), Err(Error::OraclePromiseViolated(_))));
}

#[test]
fn phase_decode_round_trip() {
    for v in codewords(10) {
        for np in [v.len(), v.len() + 2] {
            let d = phase_decode(&beta_of(&v), np).unwrap();
            assert_eq!(d.len, v.len());
            assert_eq!(d.v, v);
            assert!(d.max_deviation <= 1e-9);
            for [c, s] in &d.copies {
                assert!((c * c + s * s - 1.0).abs() < 1e-12);
                assert!(c.abs() < 1e-9 || s.abs() < 1e-9);
            }
        }
    }
}

#[test]
fn cell_law_is_a_distribution() {
    let s = spec();
    let enc = encode_input("1011").unwrap().with_alpha(r(1, 7));
    let total = cell_law(&s, &enc).into_iter().fold(Rat::zero(), |a, (_, p)| a + p);
    assert_eq!(total, Rat::one());
}

proptest! {
    #[test]
    fn beta_is_the_binary_fraction(k in 0u32..(1 << 16), len in 1usize..17) {
        let v = bits(k, len);
        let b = beta_of(&v);
        let f: f64 = v.chars().enumerate().map(|(i, c)| if c == '1' { 0.5f64.powi(i as i32 + 1) } else { 0.0 }).sum();
        let bf = num_traits::ToPrimitive::to_f64(&b).unwrap();
        prop_assert!((bf - f).abs() < 1e-15);
    }
}
