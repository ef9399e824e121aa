use nclt_core::convolutions::ConvKind;
use nclt_core::hemigroups::*;
use nclt_core::measures::{moment, Measure};
use nclt_core::C64;
use std::time::Instant;

fn gauss_family() -> GeneratingFamily {
    GeneratingFamily::linear(1.0, 0.0, &[(0.0, 1.0)]).unwrap()
}

/// Drift plus Gaussian part plus one jump location.
fn fixture_a() -> GeneratingFamily {
    GeneratingFamily::linear(1.0, 0.3, &[(0.0, 1.0), (1.0, 0.5)]).unwrap()
}

/// Two segments with different slopes at three locations.
fn fixture_b() -> GeneratingFamily {
    GeneratingFamily {
        grid: vec![0.0, 0.5, 1.0],
        m: vec![0.0, -0.1, 0.2],
        atoms: vec![
            FamilyAtom { x: -0.5, weights: vec![0.0, 0.2, 0.3] },
            FamilyAtom { x: 0.0, weights: vec![0.0, 0.4, 0.9] },
            FamilyAtom { x: 1.5, weights: vec![0.0, 0.05, 0.3] },
        ],
        form: FamilyForm::Reduced,
    }
}

fn binned_l1(m: &Measure, cdf: impl Fn(f64) -> f64) -> f64 {
    let d = m.density.as_ref().expect("density");
    let n = d.len();
    let mut err = 0.0;
    for k in 0..n {
        let a = if k == 0 { f64::NEG_INFINITY } else { d.x(k) - 0.5 * d.dx };
        let b = if k + 1 == n { f64::INFINITY } else { d.x(k) + 0.5 * d.dx };
        err += (d.values[k] * d.weight(k) - (cdf(b) - cdf(a))).abs();
    }
    err + m.atom_mass()
}

fn semicircle_cdf(x: f64) -> f64 {
    let x = x.clamp(-2.0, 2.0);
    0.5 + (x * (4.0 - x * x).sqrt() / 2.0 + 2.0 * (x / 2.0).asin()) / (2.0 * std::f64::consts::PI)
}

fn arcsine_cdf(x: f64) -> f64 {
    let a = 2f64.sqrt();
    0.5 + (x.clamp(-a, a) / a).asin() / std::f64::consts::PI
}

#[test]
fn gaussian_quadruple() {
    let start = Instant::now();
    let f = gauss_family();
    let h = |k| CHHandle::new(f.clone(), k).unwrap();
    let cf = ch_transform_eval(&h(ConvKind::Classical), 0.0, 1.0, C64::new(1.0, 0.0)).unwrap();
    assert!((cf - (-0.5f64).exp()).norm() <= 1e-9);

    let b = ch_measure(&h(ConvKind::Boolean), 0.0, 1.0, None, 2048).unwrap();
    assert_eq!(b.atoms.len(), 2);
    for (a, x) in b.atoms.iter().zip([-1.0, 1.0]) {
        assert!((a.location - x).abs() <= 1e-8 && (a.weight - 0.5).abs() <= 1e-8);
    }

    let fr = ch_measure(&h(ConvKind::Free), 0.0, 1.0, None, 4096).unwrap();
    let e = binned_l1(&fr, semicircle_cdf);
    assert!(e <= 1e-3, "free L1 {e}");

    let mo = ch_measure(&h(ConvKind::Monotone), 0.0, 1.0, None, 4096).unwrap();
    let e = binned_l1(&mo, arcsine_cdf);
    assert!(e <= 1e-3, "monotone L1 {e}");

    let cl = ch_measure(&h(ConvKind::Classical), 0.0, 1.0, None, 4096).unwrap();
    for m in [&cl, &b, &fr, &mo] {
        assert!(m.mean().abs() <= 1e-5, "mean {}", m.mean());
        assert!((m.variance() - 1.0).abs() <= 1e-4, "variance {}", m.variance());
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn moment_generators_agree_across_kinds() {
    for (fam, s) in [(fixture_a(), 0.4), (fixture_b(), 0.7)] {
        let opts = moment_options(8192);
        for kind in ConvKind::ALL {
            let h = CHHandle::new(fam.clone(), kind).unwrap();
            let t = Instant::now();
            let fd = fd_moment_generators(&h, s, 4, 1e-3, &opts).unwrap();
            println!("{kind:?}: {fd:?} ({:.2}s)", t.elapsed().as_secs_f64());
            for n in 1..=4 {
                let exact = moment_generator(&fam, s, n).unwrap();
                let v = fd[n as usize - 1];
                assert!((v - exact).abs() <= 1e-4, "{kind:?} n={n}: {v} vs {exact}");
            }
        }
    }
}

#[test]
fn moments_of_measures_match_family() {
    let f = fixture_a();
    for kind in ConvKind::ALL {
        let h = CHHandle::new(f.clone(), kind).unwrap();
        let m = ch_measure_with(&h, 0.0, 1.0, None, &moment_options(4096)).unwrap();
        assert!((moment(&m, 1) - 0.3).abs() <= 1e-4, "{kind:?} mean {}", m.mean());
        assert!((m.variance() - 1.5).abs() <= 1e-4, "{kind:?} var {}", m.variance());
    }
}

fn z_points(n: usize) -> Vec<C64> {
    (0..n).map(|k| C64::new(-2.0 + 4.0 * k as f64 / (n - 1) as f64, 0.3 + 0.2 * (k % 4) as f64)).collect()
}

#[test]
fn hemigroup_law_on_transforms() {
    let f = fixture_b();
    let (s, t) = (0.3, 0.8);
    let b = CHHandle::new(f.clone(), ConvKind::Boolean).unwrap();
    let fr = CHHandle::new(f.clone(), ConvKind::Free).unwrap();
    let mo = CHHandle::new(f.clone(), ConvKind::Monotone).unwrap();
    let cone = nclt_core::transforms::StolzCone::new(1.0, 3.0).unwrap();
    let p0t = fr.pick(0.0, t).unwrap();
    let p0s = fr.pick(0.0, s).unwrap();
    let pst = fr.pick(s, t).unwrap();
    let voic = |p: &nclt_core::transforms::PickFunction, w: C64| nclt_core::transforms::pick_invert(p, w, &cone).unwrap() - w;
    for (k, z) in z_points(20).into_iter().enumerate() {
        let k_of = |s: f64, t: f64| z - ch_transform_eval(&b, s, t, z).unwrap();
        assert!((k_of(0.0, t) - k_of(0.0, s) - k_of(s, t)).norm() <= 1e-14);

        let w = C64::new(z.re, 4.0 + k as f64);
        let lhs = voic(&p0t, w);
        let rhs = voic(&p0s, w) + voic(&pst, w);
        assert!((lhs - rhs).norm() <= 1e-9, "{lhs} vs {rhs}");

        let a = ch_transform_eval(&mo, 0.0, t, z).unwrap();
        let inner = ch_transform_eval(&mo, s, t, z).unwrap();
        let c = ch_transform_eval(&mo, 0.0, s, inner).unwrap();
        assert!((a - c).norm() <= 1e-8, "{a} vs {c}");
    }
}

#[test]
fn time_homogeneity_of_linear_families() {
    let f = fixture_a();
    for kind in ConvKind::ALL {
        let h = CHHandle::new(f.clone(), kind).unwrap();
        let a = ch_measure(&h, 0.0, 0.4, None, 2048).unwrap();
        let b = ch_measure(&h, 0.5, 0.9, None, 2048).unwrap();
        let d = nclt_core::measures::levy_distance(&a, &b).unwrap();
        assert!(d <= 1e-3, "{kind:?}: {d}");
    }
}

#[test]
fn full_form_transforms_match_reduced() {
    let red = fixture_b();
    let full = family_convert(&red, FamilyForm::Full);
    for kind in [ConvKind::Boolean, ConvKind::Free] {
        let a = CHHandle::new(red.clone(), kind).unwrap();
        let b = CHHandle::new(full.clone(), kind).unwrap();
        for z in z_points(10) {
            let u = ch_transform_eval(&a, 0.1, 0.9, z).unwrap();
            let v = ch_transform_eval(&b, 0.1, 0.9, z).unwrap();
            assert!((u - v).norm() <= 1e-12 * (1.0 + u.norm()));
        }
    }
    assert!(CHHandle::new(full, ConvKind::Monotone).is_err());
}

#[test]
fn free_subordination_semicircle() {
    let f = gauss_family();
    let (s, t): (f64, f64) = (0.35, 0.9);
    for z in z_points(20) {
        let w = (z + (z - 2.0 * t.sqrt()).sqrt() * (z + 2.0 * t.sqrt()).sqrt()) / 2.0;
        let got = free_subordination_eval(&f, s, t, z).unwrap();
        assert!((got - (w + s / w)).norm() <= 1e-10, "{got} vs {}", w + s / w);
        let fr = CHHandle::new(f.clone(), ConvKind::Free).unwrap();
        let lhs = ch_transform_eval(&fr, 0.0, s, got).unwrap();
        let rhs = ch_transform_eval(&fr, 0.0, t, z).unwrap();
        assert!((lhs - rhs).norm() <= 1e-10);
        assert_eq!(free_subordination_eval(&f, t, t, z).unwrap(), z);
        assert!((free_subordination_eval(&f, 0.0, t, z).unwrap() - w).norm() <= 1e-12);
    }
}

#[test]
fn subordination_kappa_identity() {
    let f = gauss_family();
    let bumps = default_bumps(&f, 1.0).unwrap();
    let t0 = Instant::now();
    let c = subordination_kappa_pairings(&f, 1.0, &bumps, 512).unwrap();
    println!("semicircle family: {:?} ({:.1}s)", c, t0.elapsed().as_secs_f64());
    assert!((c.chain_mass - 1.0).abs() <= 1e-3);
    assert!((c.integral_mass - 1.0).abs() <= 1e-3);
    assert!(c.residual <= 5e-3);
    assert_eq!(subordination_kappa_check(&f, 0.0, &bumps).unwrap(), 0.0);

    let g = GeneratingFamily {
        grid: vec![0.0, 0.4, 1.0],
        m: vec![0.0, 0.1, -0.05],
        atoms: vec![
            FamilyAtom { x: 0.0, weights: vec![0.0, 0.3, 0.5] },
            FamilyAtom { x: 0.8, weights: vec![0.0, 0.1, 0.35] },
        ],
        form: FamilyForm::Reduced,
    };
    let bumps = default_bumps(&g, 1.0).unwrap();
    let t0 = Instant::now();
    let c = subordination_kappa_pairings(&g, 1.0, &bumps, 512).unwrap();
    println!("random family: {:?} ({:.1}s)", c, t0.elapsed().as_secs_f64());
    assert!(c.residual <= 5e-3);
}

#[test]
fn convergence_of_shrinking_jumps() {
    let base = gauss_family();
    let fam = |n: f64| GeneratingFamily::linear(1.0, 0.0, &[(1.0 / n, 1.0)]).unwrap();
    let ts = [0.0, 0.25, 0.5, 0.75, 1.0];
    let d8 = family_luw_distance(&fam(8.0), &base, ConvKind::Boolean, &ts, 1024).unwrap();
    let d64 = family_luw_distance(&fam(64.0), &base, ConvKind::Boolean, &ts, 1024).unwrap();
    assert!(d64 < d8, "{d64} vs {d8}");
    let mo = CHHandle::new(base.clone(), ConvKind::Monotone).unwrap();
    let sup = |n: f64| {
        let h = CHHandle::new(fam(n), ConvKind::Monotone).unwrap();
        ts[1..]
            .iter()
            .map(|&t| {
                let a = ch_transform_eval(&h, 0.0, t, C64::new(0.0, 1.0)).unwrap();
                let b = ch_transform_eval(&mo, 0.0, t, C64::new(0.0, 1.0)).unwrap();
                (a - b).norm()
            })
            .fold(0.0, f64::max)
    };
    assert!(sup(64.0) < sup(8.0));
    assert!(family_luw_distance(&base, &base, ConvKind::Boolean, &ts, 1024).unwrap() <= 1e-9);
    let sub = family_luw_distance(&fam(8.0), &base, ConvKind::Boolean, &ts[..3], 1024).unwrap();
    assert!(sub <= d8);
}

#[test]
fn bijection_recovers_family_scalars() {
    let f = fixture_b();
    let (m, v) = (f.drift_at(1.0), f.reduced_increment(0.0, 1.0).unwrap().variance());
    for kind in ConvKind::ALL {
        let h = CHHandle::new(f.clone(), kind).unwrap();
        let mu = ch_measure_with(&h, 0.0, 1.0, None, &moment_options(4096)).unwrap();
        assert!((mu.mean() - m).abs() <= 1e-4, "{kind:?}");
        assert!((mu.variance() - v).abs() <= 1e-4, "{kind:?}");
    }
}

#[test]
fn json_schema_roundtrip() {
    let f = fixture_b();
    let s = f.to_json();
    assert!(s.contains("\"form\":\"reduced\"") && s.contains("\"weights\""));
    assert_eq!(GeneratingFamily::from_json(&s).unwrap(), f);
    let bad = s.replace("0.3]", "0.1]");
    assert!(GeneratingFamily::from_json(&bad).is_err());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn family_convert_roundtrip(
        xs in proptest::collection::vec(-3.0f64..3.0, 1..4),
        incs in proptest::collection::vec(0.0f64..1.0, 12),
        ms in proptest::collection::vec(-1.0f64..1.0, 3),
    ) {
        let atoms = xs.iter().enumerate().map(|(j, &x)| {
            let a = incs[3 * j];
            let b = a + incs[3 * j + 1];
            let c = b + incs[3 * j + 2];
            FamilyAtom { x, weights: vec![0.0, a, b, c] }
        }).collect();
        let f = GeneratingFamily { grid: vec![0.0, 0.3, 0.6, 1.0], m: vec![0.0, ms[0], ms[1], ms[2]], atoms, form: FamilyForm::Full };
        let back = family_convert(&family_convert(&f, FamilyForm::Reduced), FamilyForm::Full);
        for (a, b) in f.m.iter().zip(&back.m) {
            proptest::prop_assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
        for (a, b) in f.atoms.iter().zip(&back.atoms) {
            for (u, v) in a.weights.iter().zip(&b.weights) {
                proptest::prop_assert!((u - v).abs() <= 1e-14 * (1.0 + u.abs()));
            }
        }
    }
}
