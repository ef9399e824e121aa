//! One pass/fail line per acceptance criterion.

use nclt_core::capacity::*;
use nclt_core::convolutions::{free_convolve_with, monotone_convolve, ConvKind};
use nclt_core::hemigroups::*;
use nclt_core::loewner::{DrivingSpec, LoewnerChain, Segment};
use nclt_core::measures::{levy_distance, Measure};
use nclt_core::transforms::{cauchy_eval, p2_scalars, stieltjes_invert, PickFunction, StieltjesOptions};
use nclt_core::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::Instant;

type Outcome = Result<String, String>;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn sq(z: C64, a: f64) -> C64 {
    (z - a).sqrt() * (z + a).sqrt()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_discrete(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Measure {
    let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let pairs: Vec<(f64, f64)> = w.iter().map(|&wi| (rng.gen_range(-spread..spread), wi)).collect();
    Measure::discrete(&pairs).unwrap()
}

fn z_grid(n: usize) -> Vec<C64> {
    (0..n)
        .map(|k| c(-3.0 + 6.0 * (k as f64 + 0.5) / n as f64, 0.05 + 2.0 * ((k * 7) % n) as f64 / n as f64))
        .collect()
}

fn binned_l1(m: &Measure, cdf: impl Fn(f64) -> f64) -> f64 {
    let Some(d) = m.density.as_ref() else { return f64::INFINITY };
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

fn arcsine_cdf(a: f64) -> impl Fn(f64) -> f64 {
    move |x: f64| 0.5 + (x.clamp(-a, a) / a).asin() / std::f64::consts::PI
}

fn random_spec(rng: &mut ChaCha8Rng, with_drift: bool) -> DrivingSpec {
    let cuts = [0.0, rng.gen_range(0.2..0.45), rng.gen_range(0.55..0.8), 1.0];
    let segments = cuts
        .windows(2)
        .map(|w| Segment {
            t0: w[0],
            t1: w[1],
            rate: rng.gen_range(0.2..1.5),
            drift: if with_drift { rng.gen_range(-0.5..0.5) } else { 0.0 },
            kernel: {
                let n = rng.gen_range(1..4);
                random_discrete(rng, n, 1.5)
            },
        })
        .collect();
    DrivingSpec { segments }
}

fn gauss_family() -> GeneratingFamily {
    GeneratingFamily::linear(1.0, 0.0, &[(0.0, 1.0)]).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (na, nb) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let a = random_discrete(&mut rng, na, 2.0);
        let b = random_discrete(&mut rng, nb, 2.0);
        let out = monotone_convolve(&a, &b).map_err(|e| e.to_string())?;
        let fb = PickFunction::from_measure(b);
        for z in z_grid(100) {
            let lhs = cauchy_eval(&out, z).map_err(|e| e.to_string())?;
            let rhs = cauchy_eval(&a, fb.eval(z).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            worst = worst.max((lhs - rhs).norm());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-11 && secs < 1.0, format!("max |G - G∘F| = {worst:.2e}, {secs:.2}s"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let f = gauss_family();
    let h = |k| CHHandle::new(f.clone(), k).unwrap();
    let e = |e: nclt_core::Error| e.to_string();
    let cf = ch_transform_eval(&h(ConvKind::Classical), 0.0, 1.0, c(1.0, 0.0)).map_err(e)?;
    let cf_err = (cf - (-0.5f64).exp()).norm();
    let b = ch_measure(&h(ConvKind::Boolean), 0.0, 1.0, None, 2048).map_err(e)?;
    let atom_err = if b.atoms.len() == 2 && b.density.is_none() {
        b.atoms
            .iter()
            .zip([-1.0, 1.0])
            .map(|(a, x)| (a.location - x).abs().max((a.weight - 0.5).abs()))
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    let fr = ch_measure(&h(ConvKind::Free), 0.0, 1.0, None, 4096).map_err(e)?;
    let free_l1 = binned_l1(&fr, semicircle_cdf);
    let mo = ch_measure(&h(ConvKind::Monotone), 0.0, 1.0, None, 4096).map_err(e)?;
    let mono_l1 = binned_l1(&mo, arcsine_cdf(2f64.sqrt()));
    let cl = ch_measure(&h(ConvKind::Classical), 0.0, 1.0, None, 4096).map_err(e)?;
    let mut mean_err = 0.0f64;
    let mut var_err = 0.0f64;
    for m in [&cl, &b, &fr, &mo] {
        mean_err = mean_err.max(m.mean().abs());
        var_err = var_err.max((m.variance() - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        cf_err <= 1e-9 && atom_err <= 1e-8 && free_l1 <= 1e-3 && mono_l1 <= 1e-3 && mean_err <= 1e-5 && var_err <= 1e-4 && secs < 30.0,
        format!(
            "cf err {cf_err:.1e}, atom err {atom_err:.1e}, free L1 {free_l1:.1e}, monotone L1 {mono_l1:.1e}, mean err {mean_err:.1e}, var err {var_err:.1e}, {secs:.1}s"
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let chain = Arc::new(LoewnerChain::new(DrivingSpec::constant(1.0, 1.0, Measure::dirac(0.0), 0.0)).unwrap());
    let mut worst = 0.0f64;
    let mut r_err = 0.0f64;
    for t in [0.25f64, 0.5, 1.0] {
        for z in [c(0.0, 1.0), c(0.0, 2.0), c(1.0, 1.0), c(-1.0, 2.0)] {
            let v = chain.reverse_flow(0.0, t, z).map_err(|e| e.to_string())?;
            worst = worst.max((v - sq(z, (2.0 * t).sqrt())).norm());
        }
        let (_, r) = p2_scalars(&chain.pick(0.0, t)).map_err(|e| e.to_string())?;
        r_err = r_err.max((r - t).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-8 && r_err <= 1e-6 && secs < 5.0,
        format!("max |f - sqrt(z^2 - 2t)| = {worst:.1e}, max |r - t| = {r_err:.1e}, {secs:.2}s"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let bern = Measure::discrete(&[(-1.0, 0.5), (1.0, 0.5)]).unwrap();
    let (f, m) = free_convolve_with(&bern, &bern, &StieltjesOptions::with_grid(4096)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for z in z_grid(50) {
        worst = worst.max((f.eval(z).map_err(|e| e.to_string())? - sq(z, 2.0)).norm());
    }
    let l1 = binned_l1(&m, arcsine_cdf(2.0));
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-8 && l1 <= 1e-3 && secs < 10.0,
        format!("max |F - sqrt(z^2 - 4)| = {worst:.1e}, density L1 {l1:.1e}, {secs:.2}s"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let chain = Arc::new(LoewnerChain::new(random_spec(&mut rng, true)).unwrap());
    let r_of = |s: f64, t: f64| p2_scalars(&chain.pick(s, t)).map(|v| v.1).map_err(|e| e.to_string());
    let ts: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let rs = ts.iter().map(|&t| r_of(0.0, t)).collect::<Result<Vec<_>, _>>()?;
    let mut min_inc = f64::INFINITY;
    let mut inc_err = 0.0f64;
    for k in 1..ts.len() {
        let d = rs[k] - rs[k - 1];
        min_inc = min_inc.min(d);
        inc_err = inc_err.max((d - (chain.r(ts[k]) - chain.r(ts[k - 1]))).abs());
    }
    let mut add_err = 0.0f64;
    for _ in 0..10 {
        let a: f64 = rng.gen_range(0.0..1.0);
        let b: f64 = rng.gen_range(0.0..1.0);
        let (s, t) = (a.min(b), a.max(b));
        add_err = add_err.max((r_of(s, t)? - (r_of(0.0, t)? - r_of(0.0, s)?)).abs());
    }
    check(
        min_inc >= -1e-9 && inc_err <= 1e-6 && add_err <= 1e-6,
        format!("min increment {min_inc:.3e}, increment err {inc_err:.1e}, additivity err {add_err:.1e}"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10 {
        let chain = LoewnerChain::new(random_spec(&mut rng, false)).unwrap();
        for _ in 0..10 {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            let (s, t) = (a.min(b), a.max(b));
            let z = c(rng.gen_range(-2.0..2.0), rng.gen_range(0.3..2.0));
            let ft = chain.reverse_flow(0.0, t, z).map_err(|e| e.to_string())?;
            let fs = chain.reverse_flow(0.0, s, z).map_err(|e| e.to_string())?;
            let (r_s, r_t, y) = (chain.r(s), chain.r(t), z.im);
            let bound = (r_t - r_s) / y * (1.0 + r_s / (y * y));
            worst = worst.max((ft - fs).norm() - bound);
        }
    }
    check(worst <= 1e-8, format!("max (|f_t - f_s| - bound) = {worst:.3e} over 100 samples"))
}

fn criterion_7() -> Outcome {
    let fixture_a = GeneratingFamily::linear(1.0, 0.3, &[(0.0, 1.0), (1.0, 0.5)]).unwrap();
    let fixture_b = GeneratingFamily {
        grid: vec![0.0, 0.5, 1.0],
        m: vec![0.0, -0.1, 0.2],
        atoms: vec![
            FamilyAtom { x: -0.5, weights: vec![0.0, 0.2, 0.3] },
            FamilyAtom { x: 0.0, weights: vec![0.0, 0.4, 0.9] },
            FamilyAtom { x: 1.5, weights: vec![0.0, 0.05, 0.3] },
        ],
        form: FamilyForm::Reduced,
    };
    let opts = moment_options(8192);
    let mut worst = 0.0f64;
    for (fam, s) in [(fixture_a, 0.4), (fixture_b, 0.7)] {
        for kind in ConvKind::ALL {
            let h = CHHandle::new(fam.clone(), kind).map_err(|e| e.to_string())?;
            let fd = fd_moment_generators(&h, s, 4, 1e-3, &opts).map_err(|e| e.to_string())?;
            for n in 1..=4u32 {
                let exact = moment_generator(&fam, s, n).map_err(|e| e.to_string())?;
                worst = worst.max((fd[n as usize - 1] - exact).abs());
            }
        }
    }
    check(worst <= 1e-4, format!("max generator err {worst:.1e} over 2 families, 4 kinds, n <= 4"))
}

fn criterion_8() -> Outcome {
    let f = gauss_family();
    let fr = CHHandle::new(f.clone(), ConvKind::Free).unwrap();
    let (s, t) = (0.35, 0.9);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let z = c(-2.0 + 4.0 * k as f64 / 19.0, 0.2 + 0.1 * (k % 5) as f64);
        let w = free_subordination_eval(&f, s, t, z).map_err(|e| e.to_string())?;
        let lhs = ch_transform_eval(&fr, 0.0, s, w).map_err(|e| e.to_string())?;
        let rhs = ch_transform_eval(&fr, 0.0, t, z).map_err(|e| e.to_string())?;
        worst = worst.max((lhs - rhs).norm());
    }
    let bumps = default_bumps(&f, 1.0).map_err(|e| e.to_string())?;
    let residual = subordination_kappa_check(&f, 1.0, &bumps).map_err(|e| e.to_string())?;
    check(
        worst <= 1e-10 && residual <= 5e-3,
        format!("composition err {worst:.1e}, kappa residual {residual:.1e}"),
    )
}

fn criterion_9() -> Outcome {
    let base = gauss_family();
    let fam = |n: f64| GeneratingFamily::linear(1.0, 0.0, &[(1.0 / n, 1.0)]).unwrap();
    let ts = [0.0, 0.25, 0.5, 0.75, 1.0];
    let luw = |n: f64| family_luw_distance(&fam(n), &base, ConvKind::Boolean, &ts, 1024).map_err(|e| e.to_string());
    let (d8, d64) = (luw(8.0)?, luw(64.0)?);
    let mono = CHHandle::new(base.clone(), ConvKind::Monotone).unwrap();
    let sup = |n: f64| -> Result<f64, String> {
        let h = CHHandle::new(fam(n), ConvKind::Monotone).map_err(|e| e.to_string())?;
        let mut v = 0.0f64;
        for k in 1..=20 {
            let t = k as f64 / 20.0;
            let a = ch_transform_eval(&h, 0.0, t, c(0.0, 1.0)).map_err(|e| e.to_string())?;
            let b = ch_transform_eval(&mono, 0.0, t, c(0.0, 1.0)).map_err(|e| e.to_string())?;
            v = v.max((a - b).norm());
        }
        Ok(v)
    };
    let (s8, s64) = (sup(8.0)?, sup(64.0)?);
    check(
        d64 < d8 && s64 < s8,
        format!("distance {d8:.3e} -> {d64:.3e}, sup |f_t(i) diff| {s8:.3e} -> {s64:.3e}"),
    )
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let e = |e: nclt_core::Error| e.to_string();
    let hd = HullSpec::HalfDisk { radius: 1.0 };
    let sl = HullSpec::VerticalSlit { foot: 0.0, length: 1.0 };
    let ex_hd = hcap_exact(&hd).map_err(e)?;
    let ex_sl = hcap_exact(&sl).map_err(e)?;
    let exact_ok = (ex_hd - 1.0).abs() <= 1e-12 && (ex_sl - 0.5).abs() <= 1e-12;
    let mc_hd = hcap_mc(&hd, &McParams::new(1e-3, 200_000, 11)).map_err(e)?;
    let mc_sl = hcap_mc(&sl, &McParams::new(1e-3, 200_000, 12)).map_err(e)?;
    let mc_ok = (mc_hd.estimate - 1.0).abs() <= 0.05 && (mc_sl.estimate - 0.5).abs() <= 0.05;
    let circle: Vec<C64> =
        (0..720).map(|k| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / 720.0)).collect();
    let segment: Vec<C64> = (0..2000).map(|k| c(k as f64 / 1999.0, 0.0)).collect();
    let tc = transfinite_diameter(&circle, 30).map_err(e)?;
    let ts = transfinite_diameter(&segment, 30).map_err(e)?;
    let tfd_ok = (tc.d_inf - 1.0).abs() <= 0.02 && (ts.d_inf - 0.25).abs() <= 0.03 * 0.25;
    let fixtures = [
        hd.clone(),
        sl.clone(),
        HullSpec::VerticalSlit { foot: -2.0, length: 0.3 },
        HullSpec::HalfDisk { radius: 0.4 },
    ];
    let mut lln_ok = true;
    for h in &fixtures {
        let (_, lo, hi) = lln_bounds_check(h, 0.005, None).map_err(e)?;
        lln_ok &= lo && hi;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        exact_ok && mc_ok && tfd_ok && lln_ok && secs < 120.0,
        format!(
            "exact {ex_hd}, {ex_sl}; mc {:.4}±{:.4}, {:.4}±{:.4}; d_inf circle {:.4} (d_30 {:.4}), segment {:.4}; lln {lln_ok}; {secs:.1}s",
            mc_hd.estimate, mc_hd.stderr, mc_sl.estimate, mc_sl.stderr, tc.d_inf, tc.d_n, ts.d_inf
        ),
    )
}

fn criterion_11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..6);
        let mu = random_discrete(&mut rng, n, 2.0);
        let g = |z: C64| cauchy_eval(&mu, z);
        let out = stieltjes_invert(&g, (-4.0, 4.0), 1024, &[]).map_err(|e| e.to_string())?;
        worst = worst.max(levy_distance(&mu, &out).map_err(|e| e.to_string())?);
    }
    check(worst <= 0.02, format!("max Levy distance {worst:.1e} over 50 measures"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("monotone composition law", criterion_1),
        ("gaussian quadruple", criterion_2),
        ("loewner closed form", criterion_3),
        ("free bernoulli", criterion_4),
        ("residue continuity and additivity", criterion_5),
        ("distortion bound", criterion_6),
        ("moment generators", criterion_7),
        ("subordination", criterion_8),
        ("convergence", criterion_9),
        ("capacity", criterion_10),
        ("inversion roundtrip", criterion_11),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
