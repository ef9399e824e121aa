//! Classical, free, boolean and monotone convolution of probability measures,
//! and cumulants by summation over partition lattices.

use crate::error::{Error, Result};
use crate::measures::{canonicalize, classical_convolve, default_merge_tol, moment, Atom, Measure};
use crate::poly::Poly;
use crate::transforms::{cauchy_raw, stieltjes_invert_with, PickFunction, StieltjesOptions};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// The four independences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Classical,
    Free,
    Boolean,
    Monotone,
}

impl ConvKind {
    pub const ALL: [ConvKind; 4] = [ConvKind::Classical, ConvKind::Free, ConvKind::Boolean, ConvKind::Monotone];

    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Classical => "classical",
            ConvKind::Free => "free",
            ConvKind::Boolean => "boolean",
            ConvKind::Monotone => "monotone",
        }
    }
}

impl std::str::FromStr for ConvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(ConvKind::Classical),
            "free" => Ok(ConvKind::Free),
            "boolean" => Ok(ConvKind::Boolean),
            "monotone" => Ok(ConvKind::Monotone),
            _ => Err(Error::InvalidArgument(format!("unknown convolution kind {s}"))),
        }
    }
}

const PROB_TOL: f64 = 1e-9;
const REAL_TOL: f64 = 1e-10;

fn check_probability(m: &Measure) -> Result<()> {
    m.validate()?;
    if (m.mass() - 1.0).abs() > PROB_TOL {
        return Err(Error::NotProbability(m.mass()));
    }
    Ok(())
}

/// `N` and `D` with `G = N/D` for a discrete measure.
fn rational_parts(m: &Measure) -> (Poly, Poly) {
    let locs: Vec<f64> = m.atoms.iter().map(|a| a.location).collect();
    let d = Poly::from_roots(&locs);
    let mut n = Poly::constant(0.0);
    for (k, a) in m.atoms.iter().enumerate() {
        let others: Vec<f64> = locs.iter().enumerate().filter(|(l, _)| *l != k).map(|(_, &x)| x).collect();
        n = n.add(&Poly::from_roots(&others).scale(a.weight));
    }
    (n, d)
}

/// `F(x)` and `F'(x)` of a discrete measure on the real line, stable at and near atoms.
fn f_real(m: &Measure, x: f64) -> (f64, f64) {
    let k = m
        .atoms
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| (x - a.location).abs().total_cmp(&(x - b.location).abs()))
        .map(|(k, _)| k)
        .expect("nonempty measure");
    let d = x - m.atoms[k].location;
    let w = m.atoms[k].weight;
    let (mut r1, mut r2) = (0.0, 0.0);
    for (l, a) in m.atoms.iter().enumerate() {
        if l != k {
            let r = 1.0 / (x - a.location);
            r1 += a.weight * r;
            r2 += a.weight * r * r;
        }
    }
    // g = w/d + r1, g' = -(w/d^2 + r2)
    let den = w + d * r1;
    (d / den, (w + d * d * r2) / (den * den))
}

/// Real roots of `p`, polished by Newton on `phi`, each paired with `1/phi'`.
pub(crate) fn poles_with_residues(p: &Poly, phi: impl Fn(f64) -> (f64, f64)) -> Vec<Atom> {
    let mut out = Vec::new();
    for r in p.roots() {
        if r.im.abs() > REAL_TOL * (1.0 + r.norm()) {
            continue;
        }
        let mut x = r.re;
        let (mut v, mut dv) = phi(x);
        for _ in 0..12 {
            if v == 0.0 || dv == 0.0 {
                break;
            }
            let xn = x - v / dv;
            let (vn, dvn) = phi(xn);
            if vn.abs() < v.abs() && vn.is_finite() {
                x = xn;
                v = vn;
                dv = dvn;
            } else {
                break;
            }
        }
        if dv > 0.0 && dv.is_finite() {
            out.push(Atom::new(x, 1.0 / dv));
        }
    }
    out
}

pub(crate) fn finish_discrete(atoms: Vec<Atom>) -> Result<Measure> {
    let total: f64 = atoms.iter().map(|a| a.weight).sum();
    if total < 1.0 - 1e-6 {
        return Err(Error::MassLeak(total));
    }
    let m = Measure { atoms, density: None };
    canonicalize(&m, default_merge_tol(&m))
}

/// Window around the Minkowski sum of the support hulls.
fn output_window(a: &Measure, b: &Measure) -> (f64, f64) {
    let (la, ha) = a.support_hull().unwrap_or((0.0, 0.0));
    let (lb, hb) = b.support_hull().unwrap_or((0.0, 0.0));
    let (lo, hi) = (la + lb, ha + hb);
    let pad = 0.02 * (hi - lo) + 1e-3;
    (lo - pad, hi + pad)
}

/// Inverts `g` on `window`, widening it while mass leaks out.
pub(crate) fn invert_widening(g: &(dyn Fn(C64) -> Result<C64> + Sync), window: (f64, f64), opts: &StieltjesOptions) -> Result<Measure> {
    let (mut lo, mut hi) = window;
    for _ in 0..6 {
        match stieltjes_invert_with(g, (lo, hi), opts) {
            Err(Error::WindowTooSmall { .. }) => {
                let w = hi - lo;
                lo -= 0.5 * w;
                hi += 0.5 * w;
            }
            other => return other,
        }
    }
    stieltjes_invert_with(g, (lo, hi), opts)
}

/// `a ▷ b` with the default inversion grid.
pub fn monotone_convolve(a: &Measure, b: &Measure) -> Result<Measure> {
    monotone_convolve_with(a, b, &StieltjesOptions::default())
}

/// `a ▷ b`: exact when both are discrete, otherwise by inversion of `G_a ∘ F_b`.
pub fn monotone_convolve_with(a: &Measure, b: &Measure, opts: &StieltjesOptions) -> Result<Measure> {
    check_probability(a)?;
    check_probability(b)?;
    if a.is_discrete() && b.is_discrete() {
        let (nb, db) = rational_parts(b);
        let mut atoms = Vec::new();
        for aj in &a.atoms {
            if aj.location == 0.0 {
                atoms.extend(b.atoms.iter().map(|bk| Atom::new(bk.location, aj.weight * bk.weight)));
                continue;
            }
            let p = db.sub(&nb.scale(aj.location));
            let phi = |x: f64| {
                let (f, fp) = f_real(b, x);
                (f - aj.location, fp)
            };
            for at in poles_with_residues(&p, phi) {
                atoms.push(Atom::new(at.location, aj.weight * at.weight));
            }
        }
        return finish_discrete(atoms);
    }
    let fb = PickFunction::from_measure(b.clone());
    let g = |z: C64| -> Result<C64> { Ok(cauchy_raw(a, fb.eval(z)?)) };
    invert_widening(&g, output_window(a, b), opts)
}

/// `a ⊎ b` with the default inversion grid.
pub fn boolean_convolve(a: &Measure, b: &Measure) -> Result<Measure> {
    boolean_convolve_with(a, b, &StieltjesOptions::default())
}

/// `a ⊎ b`: `F = F_a + F_b - z`, exact for discrete inputs.
pub fn boolean_convolve_with(a: &Measure, b: &Measure, opts: &StieltjesOptions) -> Result<Measure> {
    check_probability(a)?;
    check_probability(b)?;
    if a.is_discrete() && b.is_discrete() {
        let (na, da) = rational_parts(a);
        let (nb, db) = rational_parts(b);
        let p = da.mul(&nb).add(&db.mul(&na)).sub(&na.mul(&nb).shift_up());
        let phi = |x: f64| {
            let (fa, fpa) = f_real(a, x);
            let (fb, fpb) = f_real(b, x);
            (fa + fb - x, fpa + fpb - 1.0)
        };
        return finish_discrete(poles_with_residues(&p, phi));
    }
    let fa = PickFunction::from_measure(a.clone());
    let fb = PickFunction::from_measure(b.clone());
    let g = |z: C64| -> Result<C64> { Ok(1.0 / (fa.eval(z)? + fb.eval(z)? - z)) };
    invert_widening(&g, output_window(a, b), opts)
}

/// Subordination function `ω₁(z)` for the pair `(fa, fb)` of reciprocal Cauchy transforms.
///
/// Fixed point of `w ↦ z + h_b(z + h_a(w))` with `h = F - id`, Newton-accelerated.
pub fn subordination_omega(fa: &PickFunction, fb: &PickFunction, z: C64) -> Result<C64> {
    match omega_from(fa, fb, z, z) {
        Ok(w) => Ok(w),
        Err(Error::FixedPointStall(_)) => {
            // Continuation from higher up.
            let mut y = z.im.max(1.0) * 2.0;
            let mut w = omega_from(fa, fb, C64::new(z.re, y), C64::new(z.re, y))?;
            while y > z.im {
                let y_next = (y * 0.5).max(z.im);
                w = omega_from(fa, fb, C64::new(z.re, y_next), w)?;
                y = y_next;
            }
            Ok(w)
        }
        Err(e) => Err(e),
    }
}

fn omega_from(fa: &PickFunction, fb: &PickFunction, z: C64, w0: C64) -> Result<C64> {
    let mut w = if w0.im > 0.0 { w0 } else { z };
    let phi = |w: C64| -> Result<(C64, C64)> {
        let (ha, hpa) = fa.displacement_d(w)?;
        let u = z + ha;
        let (hb, hpb) = fb.displacement_d(u)?;
        Ok((w - z - hb, 1.0 - hpb * hpa))
    };
    let (mut r, mut dr) = phi(w)?;
    let mut best = (w, r.norm());
    let mut since_best = 0;
    for _ in 0..500 {
        let plain = z + (w - z - r);
        let mut next = plain;
        let newton = w - r / dr;
        if newton.im > 0.0 && newton.is_finite() {
            if let Ok((rn, _)) = phi(newton) {
                if rn.norm() < r.norm() {
                    next = newton;
                }
            }
        }
        if !(next.im > 0.0) {
            next = C64::new(next.re, w.im * 0.5);
        }
        let step = (next - w).norm();
        w = next;
        let (rn, drn) = phi(w)?;
        r = rn;
        dr = drn;
        if step <= 1e-13 * (1.0 + w.norm()) || r.norm() <= 1e-15 * (1.0 + w.norm()) {
            return Ok(w);
        }
        if r.norm() < best.1 {
            best = (w, r.norm());
            since_best = 0;
        } else {
            since_best += 1;
            // Residual at its rounding floor.
            if since_best >= 20 && best.1 <= 1e-8 * (1.0 + best.0.norm()) {
                return Ok(best.0);
            }
        }
    }
    Err(Error::FixedPointStall(500))
}

/// `F_{a⊞b}` as a Pick function built from two reciprocal Cauchy transforms.
pub fn free_pick(fa: PickFunction, fb: PickFunction) -> PickFunction {
    let fa = Arc::new(fa);
    let fb = Arc::new(fb);
    PickFunction::explicit_displacement("free convolution", move |z| {
        let w = subordination_omega(&fa, &fb, z)?;
        Ok((w - z) + fa.displacement(w)?)
    })
}

/// `a ⊞ b` with the default inversion grid.
pub fn free_convolve(a: &Measure, b: &Measure) -> Result<(PickFunction, Measure)> {
    free_convolve_with(a, b, &StieltjesOptions::default())
}

/// `a ⊞ b`: the reciprocal Cauchy transform by subordination, the measure by inversion.
pub fn free_convolve_with(a: &Measure, b: &Measure, opts: &StieltjesOptions) -> Result<(PickFunction, Measure)> {
    check_probability(a)?;
    check_probability(b)?;
    let f = free_pick(PickFunction::from_measure(a.clone()), PickFunction::from_measure(b.clone()));
    let g = |z: C64| -> Result<C64> { Ok(1.0 / f.eval(z)?) };
    let m = invert_widening(&g, output_window(a, b), opts)?;
    Ok((f, m))
}

/// Dispatches on the convolution kind; free convolution returns only the measure.
pub fn convolve(kind: ConvKind, a: &Measure, b: &Measure, opts: &StieltjesOptions) -> Result<Measure> {
    match kind {
        ConvKind::Classical => {
            check_probability(a)?;
            check_probability(b)?;
            classical_convolve(a, b)
        }
        ConvKind::Free => Ok(free_convolve_with(a, b, opts)?.1),
        ConvKind::Boolean => boolean_convolve_with(a, b, opts),
        ConvKind::Monotone => monotone_convolve_with(a, b, opts),
    }
}

/// Largest order accepted by the partition-lattice routines.
pub const MAX_CUMULANT_ORDER: usize = 12;

/// Visits all set partitions of `{0..n}` as restricted growth strings.
fn for_each_partition(n: usize, mut visit: impl FnMut(&[usize], usize)) {
    if n == 0 {
        return;
    }
    let mut a = vec![0usize; n];
    let mut maxv = vec![0usize; n];
    loop {
        let nblocks = maxv[n - 1] + 1;
        visit(&a, nblocks);
        // Next restricted growth string.
        let mut i = n - 1;
        loop {
            if i == 0 {
                return;
            }
            if a[i] <= maxv[i - 1] {
                a[i] += 1;
                maxv[i] = maxv[i - 1].max(a[i]);
                for j in i + 1..n {
                    a[j] = 0;
                    maxv[j] = maxv[j - 1];
                }
                break;
            }
            i -= 1;
        }
    }
}

fn is_noncrossing(a: &[usize], nblocks: usize) -> bool {
    let mut first = vec![usize::MAX; nblocks];
    let mut last = vec![0; nblocks];
    for (i, &b) in a.iter().enumerate() {
        if first[b] == usize::MAX {
            first[b] = i;
        }
        last[b] = i;
    }
    let mut stack: Vec<usize> = Vec::new();
    for (i, &b) in a.iter().enumerate() {
        if first[b] == i {
            stack.push(b);
        } else if stack.last() != Some(&b) {
            return false;
        }
        if last[b] == i {
            stack.pop();
        }
    }
    true
}

fn is_interval(a: &[usize]) -> bool {
    a.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1)
}

/// Cumulants `κ_1..κ_n` from moments `m_1..m_n` by Möbius recursion over the
/// partition class of `kind`.
pub fn cumulants_from_moments(kind: ConvKind, moments: &[f64]) -> Result<Vec<f64>> {
    let n_max = moments.len();
    if n_max > MAX_CUMULANT_ORDER {
        return Err(Error::TooLarge(n_max));
    }
    if kind == ConvKind::Monotone {
        return Err(Error::InvalidArgument("monotone cumulants are not supported".into()));
    }
    let mut kappa: Vec<f64> = Vec::with_capacity(n_max);
    let mut sizes = vec![0usize; n_max];
    for n in 1..=n_max {
        let mut acc = 0.0;
        for_each_partition(n, |a, nblocks| {
            if nblocks == 1 {
                return;
            }
            let keep = match kind {
                ConvKind::Classical => true,
                ConvKind::Free => is_noncrossing(a, nblocks),
                _ => is_interval(a),
            };
            if !keep {
                return;
            }
            sizes[..nblocks].iter_mut().for_each(|s| *s = 0);
            for &b in a {
                sizes[b] += 1;
            }
            acc += sizes[..nblocks].iter().map(|&s| kappa[s - 1]).product::<f64>();
        });
        kappa.push(moments[n - 1] - acc);
    }
    Ok(kappa)
}

/// Cumulants of a probability measure up to order `n_max`.
pub fn cumulants(kind: ConvKind, m: &Measure, n_max: usize) -> Result<Vec<f64>> {
    if n_max > MAX_CUMULANT_ORDER {
        return Err(Error::TooLarge(n_max));
    }
    let moments: Vec<f64> = (1..=n_max as u32).map(|k| moment(m, k)).collect();
    cumulants_from_moments(kind, &moments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bern() -> Measure {
        Measure::discrete(&[(-1.0, 0.5), (1.0, 0.5)]).unwrap()
    }

    #[test]
    fn partition_counts() {
        let mut all = 0;
        let mut nc = 0;
        let mut iv = 0;
        for_each_partition(5, |a, k| {
            all += 1;
            nc += is_noncrossing(a, k) as usize;
            iv += is_interval(a) as usize;
        });
        assert_eq!((all, nc, iv), (52, 42, 16));
    }

    #[test]
    fn boolean_bernoulli_square() {
        let m = boolean_convolve(&bern(), &bern()).unwrap();
        assert_eq!(m.atoms.len(), 2);
        for (a, x) in m.atoms.iter().zip([-(2f64.sqrt()), 2f64.sqrt()]) {
            assert!((a.location - x).abs() < 1e-14 && (a.weight - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn monotone_bernoulli_square() {
        let m = monotone_convolve(&bern(), &bern()).unwrap();
        let s5 = 5f64.sqrt();
        let want = [(-1.0 - s5) / 2.0, (1.0 - s5) / 2.0, (-1.0 + s5) / 2.0, (1.0 + s5) / 2.0];
        assert_eq!(m.atoms.len(), 4);
        for (a, x) in m.atoms.iter().zip(want) {
            assert!((a.location - x).abs() < 1e-14 && a.weight > 0.0);
        }
        assert!((m.mass() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dirac_shifts() {
        let mu = Measure::discrete(&[(-0.5, 0.25), (2.0, 0.75)]).unwrap();
        let m = monotone_convolve(&mu, &Measure::dirac(0.3)).unwrap();
        for (a, b) in m.atoms.iter().zip(&mu.atoms) {
            assert!((a.location - b.location - 0.3).abs() < 1e-14);
            assert!((a.weight - b.weight).abs() < 1e-14);
        }
        let m = monotone_convolve(&Measure::dirac(0.2), &Measure::dirac(0.3)).unwrap();
        assert!((m.atoms[0].location - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cumulant_oracles() {
        let k = cumulants(ConvKind::Free, &bern(), 6).unwrap();
        let want = [0.0, 1.0, 0.0, -1.0, 0.0, 2.0];
        for (a, b) in k.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let cat = [0.0, 1.0, 0.0, 2.0, 0.0, 5.0, 0.0, 14.0];
        let k = cumulants_from_moments(ConvKind::Free, &cat).unwrap();
        for (i, v) in k.iter().enumerate() {
            assert!((v - if i == 1 { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
        let k = cumulants(ConvKind::Classical, &Measure::dirac(0.7), 5).unwrap();
        assert!((k[0] - 0.7).abs() < 1e-15 && k[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(cumulants(ConvKind::Free, &bern(), 13), Err(Error::TooLarge(13))));
    }
}
