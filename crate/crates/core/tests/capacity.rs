use nclt_core::capacity::*;
use nclt_core::transforms::PickFunction;
use nclt_core::C64;
use std::sync::Arc;
use std::time::Instant;

fn circle(n: usize) -> Vec<C64> {
    (0..n).map(|k| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / n as f64)).collect()
}

fn segment(n: usize) -> Vec<C64> {
    (0..n).map(|k| C64::new(k as f64 / (n - 1) as f64, 0.0)).collect()
}

fn sampled_half_disk(r: f64, h: f64) -> HullSpec {
    let pts = HullSpec::HalfDisk { radius: r }.sample_points(h).unwrap();
    HullSpec::Sampled(SampledHull {
        points: pts,
        spacing: h,
        inside: Some(Arc::new(move |z: C64| z.norm() <= r)),
    })
}

#[test]
fn mc_half_disk_and_slit() {
    let t = Instant::now();
    let hd = hcap_mc(&HullSpec::HalfDisk { radius: 1.0 }, &McParams::new(1e-3, 200_000, 11)).unwrap();
    println!("half disk {hd:?} ({:.1}s)", t.elapsed().as_secs_f64());
    assert!((hd.estimate - 1.0).abs() <= 0.05);
    let t = Instant::now();
    let sl = hcap_mc(&HullSpec::VerticalSlit { foot: 0.0, length: 1.0 }, &McParams::new(1e-3, 200_000, 12)).unwrap();
    println!("slit {sl:?} ({:.1}s)", t.elapsed().as_secs_f64());
    assert!((sl.estimate - 0.5).abs() <= 0.05);
}

#[test]
fn mc_is_deterministic_and_scales() {
    let h = HullSpec::VerticalSlit { foot: 0.3, length: 0.7 };
    let p = McParams::new(1e-3, 20_000, 5);
    assert_eq!(hcap_mc(&h, &p).unwrap(), hcap_mc(&h, &p).unwrap());
    let a = hcap_mc(&h, &p).unwrap().estimate;
    let b = hcap_mc(&h.scaled(2.0).unwrap(), &McParams::new(2e-3, 20_000, 6)).unwrap().estimate;
    let ratio = b / a;
    assert!((3.6..=4.4).contains(&ratio), "{ratio}");
}

#[test]
fn mc_monotone_under_inclusion() {
    let p = McParams { strip_height: Some(1.25), ..McParams::new(1e-3, 50_000, 9) };
    let small = hcap_mc(&HullSpec::HalfDisk { radius: 0.5 }, &p).unwrap();
    let big = hcap_mc(&HullSpec::HalfDisk { radius: 1.0 }, &p).unwrap();
    let sep = (big.estimate - small.estimate) / small.stderr.hypot(big.stderr);
    assert!(sep >= 3.0, "{small:?} {big:?}");
}

#[test]
fn mc_sampled_hull() {
    let h = sampled_half_disk(1.0, 0.02);
    let e = hcap_mc(&h, &McParams::new(5e-3, 20_000, 3)).unwrap();
    println!("sampled {e:?}");
    assert!((e.estimate - 1.0).abs() <= 0.08);
    assert!(matches!(hcap_mc(&HullSpec::MappedBy(PickFunction::identity()), &McParams::new(1e-3, 10, 1)), Err(nclt_core::Error::InvalidArgument(_))));
}

#[test]
fn exact_capacity_of_mapped_semicircle() {
    for v in [0.5, 1.0, 2.3] {
        let a = 2.0 * f64::sqrt(v);
        let f = PickFunction::explicit_displacement("semicircle F", move |z: C64| {
            let s = (z - a).sqrt() * (z + a).sqrt();
            // F(z) - z = (s - z)/2 = -2v/(z + s)
            Ok(-2.0 * v / (z + s))
        });
        let c = hcap_exact(&HullSpec::MappedBy(f)).unwrap();
        assert!((c - v).abs() <= 1e-8, "{c} vs {v}");
    }
}

#[test]
fn transfinite_diameter_fixtures() {
    let t = Instant::now();
    let c = transfinite_diameter(&circle(720), 30).unwrap();
    println!("circle d_30 {} d_inf {} ({:.1}s)", c.d_n, c.d_inf, t.elapsed().as_secs_f64());
    assert!((c.d_n - 30f64.powf(1.0 / 29.0)).abs() <= 1e-9);
    assert!((c.d_inf - 1.0).abs() <= 0.02);
    let t = Instant::now();
    let s = transfinite_diameter(&segment(2000), 30).unwrap();
    println!("segment d_30 {} d_inf {} ({:.1}s)", s.d_n, s.d_inf, t.elapsed().as_secs_f64());
    assert!((s.d_inf - 0.25).abs() <= 0.03 * 0.25);
    for r in [&c, &s] {
        for w in r.raw.windows(2) {
            assert!(w[1].1 <= w[0].1 * (1.0 + 1e-12), "{:?}", w);
        }
    }
    assert!(s.csv().starts_with("n,d_n\n2,"));
}

#[test]
fn lln_verdicts_on_fixtures() {
    let hulls = [
        HullSpec::HalfDisk { radius: 1.0 },
        HullSpec::VerticalSlit { foot: 0.0, length: 1.0 },
        HullSpec::VerticalSlit { foot: -2.0, length: 0.3 },
        HullSpec::HalfDisk { radius: 0.4 },
    ];
    for h in &hulls {
        let (area, lo, hi) = lln_bounds_check(h, 0.005, None).unwrap();
        println!("{h:?}: area {area}");
        assert!(lo && hi, "{h:?}");
    }
    let (area, _, _) = lln_bounds_check(&hulls[0], 0.005, None).unwrap();
    assert!(area > 2.0 * std::f64::consts::PI / 7.0 && area < 66.0);
    let (area, _, _) = lln_bounds_check(&hulls[1], 0.005, None).unwrap();
    assert!((area - std::f64::consts::PI).abs() < 0.05, "{area}");
    let sampled = sampled_half_disk(1.0, 0.02);
    let (_, lo, hi) = lln_bounds_check(&sampled, 0.01, Some(1.0)).unwrap();
    assert!(lo && hi);
    let pgm = disk_cover(&hulls[1], 0.05).unwrap().to_pgm();
    assert!(pgm.starts_with(b"P5\n"));
}
