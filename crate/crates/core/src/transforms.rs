//! Pick-function machinery: Cauchy transforms, reciprocal and energy transforms,
//! Nevanlinna data, Stieltjes inversion, angular residues and inversion on cones.

use crate::error::{Error, Result};
use crate::loewner::LoewnerChain;
use crate::measures::{canonicalize, default_merge_tol, Atom, GridDensity, Measure};
use crate::poly::Poly;
use crate::quad::{gauss_on, neville_zero};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

const NEAR_CELLS: f64 = 20.0;

fn ci(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn check_upper(z: C64) -> Result<()> {
    if z.im > 0.0 && z.re.is_finite() && z.im.is_finite() {
        Ok(())
    } else {
        Err(Error::OutOfHalfPlane(format!("{z}")))
    }
}

/// Range of segment indices treated in closed form near `z`.
fn near_segments(d: &GridDensity, z: C64) -> std::ops::Range<usize> {
    let n = d.len();
    let r = NEAR_CELLS * d.dx;
    if n < 2 || z.im >= r {
        return 0..0;
    }
    let lo = ((z.re - r - d.x0) / d.dx).floor().max(0.0);
    let hi = ((z.re + r - d.x0) / d.dx).ceil().min((n - 1) as f64);
    if hi <= lo {
        return 0..0;
    }
    (lo as usize)..(hi as usize)
}

/// Keeps `z` in the closed upper half-plane, mapping `-0.0` to `+0.0`.
fn lift(z: C64) -> C64 {
    if z.im > 0.0 {
        z
    } else {
        ci(z.re, 0.0)
    }
}

const SERIES_TERMS: usize = 9;

/// Moments `∫_0^h (1 - s/h) s^j ds`.
fn half_hat_moments(h: f64) -> [f64; SERIES_TERMS] {
    let mut m = [0.0; SERIES_TERMS];
    let mut p = h;
    for (j, v) in m.iter_mut().enumerate() {
        p *= if j == 0 { 1.0 } else { h };
        *v = p / ((j + 1) * (j + 2)) as f64;
    }
    m
}

/// Density contribution: integrals of the piecewise-linear interpolant against
/// `1/(z-x)`, `1/(z-x)^2` and `x/(z-x)`.
fn density_parts(d: &GridDensity, z: C64) -> (C64, C64, C64) {
    let n = d.len();
    let zero = C64::new(0.0, 0.0);
    let (mut g, mut g2, mut gx) = (zero, zero, zero);
    if n < 2 {
        return (g, g2, gx);
    }
    let h = d.dx;
    let near = near_segments(d, z);
    let mom = half_hat_moments(h);
    // Full hats have vanishing odd moments.
    for k in 0..n {
        let v = d.values[k];
        if v == 0.0 {
            continue;
        }
        let has_left = k > 0 && !near.contains(&(k - 1));
        let has_right = k + 1 < n && !near.contains(&k);
        if !has_left && !has_right {
            continue;
        }
        let x = d.x(k);
        let r = 1.0 / (z - x);
        let mut rp = r;
        let (mut a, mut a2, mut ax) = (zero, zero, zero);
        for (j, &mj) in mom.iter().enumerate() {
            let w = match (has_left, has_right) {
                (true, true) => {
                    if j % 2 == 1 {
                        0.0
                    } else {
                        2.0 * mj
                    }
                }
                (false, true) => mj,
                _ => {
                    if j % 2 == 1 {
                        -mj
                    } else {
                        mj
                    }
                }
            };
            if w != 0.0 {
                // rp = r^{j+1}
                a += w * rp;
                a2 += w * (j + 1) as f64 * rp * r;
                ax += if j == 0 { w * x * rp } else { w * z * rp };
            }
            rp *= r;
        }
        g += v * a;
        g2 += v * a2;
        gx += v * ax;
    }
    if !near.is_empty() {
        let zz = lift(z);
        for k in near {
            let (v0, v1) = (d.values[k], d.values[k + 1]);
            if v0 == 0.0 && v1 == 0.0 {
                continue;
            }
            let (x0, x1) = (d.x(k), d.x(k + 1));
            let s = (v1 - v0) / h;
            let u0 = zz - x0;
            let u1 = zz - x1;
            let lr = u0.ln() - u1.ln();
            let c = v0 + s * u0;
            let seg_g = c * lr - s * h;
            let seg_g2 = c * (1.0 / u1 - 1.0 / u0) - s * lr;
            let seg_mass = 0.5 * h * (v0 + v1);
            g += seg_g;
            g2 += seg_g2;
            gx += zz * seg_g - seg_mass;
        }
    }
    (g, g2, gx)
}

/// Cauchy transform without the half-plane check.
pub(crate) fn cauchy_raw(m: &Measure, z: C64) -> C64 {
    let mut g: C64 = m.atoms.iter().map(|a| a.weight / (z - a.location)).sum();
    if let Some(d) = &m.density {
        g += density_parts(d, z).0;
    }
    g
}

/// `G(z)` and `G'(z)`.
pub(crate) fn cauchy_with_deriv(m: &Measure, z: C64) -> (C64, C64) {
    let mut g = C64::new(0.0, 0.0);
    let mut g2 = C64::new(0.0, 0.0);
    for a in &m.atoms {
        let r = 1.0 / (z - a.location);
        g += a.weight * r;
        g2 += a.weight * r * r;
    }
    if let Some(d) = &m.density {
        let (dg, dg2, _) = density_parts(d, z);
        g += dg;
        g2 += dg2;
    }
    (g, -g2)
}

/// `∫ x/(z-x) dμ`, computed without cancellation at large `|z|`.
pub(crate) fn cauchy_first(m: &Measure, z: C64) -> C64 {
    let mut s: C64 = m.atoms.iter().map(|a| a.weight * a.location / (z - a.location)).sum();
    if let Some(d) = &m.density {
        s += density_parts(d, z).2;
    }
    s
}

/// Cauchy transform `∫ 1/(z-x) dμ(x)` for `Im z > 0`.
pub fn cauchy_eval(m: &Measure, z: C64) -> Result<C64> {
    check_upper(z)?;
    Ok(cauchy_raw(m, z))
}

/// Which transform `pick_eval` returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PickKind {
    Raw,
    FOf,
    KOf,
}

type BoxedFn = Box<dyn Fn(C64) -> Result<C64> + Send + Sync>;

/// User-supplied evaluator, optionally with a precise `f(z) - z`.
pub struct ExplicitFn {
    pub name: String,
    pub eval: BoxedFn,
    pub displacement: Option<BoxedFn>,
}

/// Holomorphic self-map of the upper half-plane.
#[derive(Clone)]
pub enum PickFunction {
    /// `F_μ = 1/G_μ`.
    FromMeasureF(Arc<Measure>),
    /// `-G_μ`.
    FromMeasureGNeg(Arc<Measure>),
    Rational { num: Poly, den: Poly },
    /// `inner(z + inner_shift) + outer_shift`.
    Shifted { inner: Arc<PickFunction>, outer_shift: f64, inner_shift: f64 },
    Composition { outer: Arc<PickFunction>, inner: Arc<PickFunction> },
    LoewnerBacked { chain: Arc<LoewnerChain>, s: f64, t: f64 },
    Explicit(Arc<ExplicitFn>),
}

impl fmt::Debug for PickFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PickFunction::FromMeasureF(m) => write!(f, "F[{} atoms]", m.atoms.len()),
            PickFunction::FromMeasureGNeg(m) => write!(f, "-G[{} atoms]", m.atoms.len()),
            PickFunction::Rational { num, den } => write!(f, "Rational({:?}/{:?})", num.c, den.c),
            PickFunction::Shifted { inner, outer_shift, inner_shift } => {
                write!(f, "Shifted({inner:?}, {outer_shift}, {inner_shift})")
            }
            PickFunction::Composition { outer, inner } => write!(f, "({outer:?}) o ({inner:?})"),
            PickFunction::LoewnerBacked { s, t, .. } => write!(f, "Loewner f_{{{s},{t}}}"),
            PickFunction::Explicit(e) => write!(f, "Explicit({})", e.name),
        }
    }
}

impl PickFunction {
    pub fn from_measure(m: Measure) -> Self {
        PickFunction::FromMeasureF(Arc::new(m))
    }

    pub fn identity() -> Self {
        PickFunction::Rational { num: Poly::new(vec![0.0, 1.0]), den: Poly::constant(1.0) }
    }

    /// `z - a`.
    pub fn translation(a: f64) -> Self {
        PickFunction::Rational { num: Poly::new(vec![-a, 1.0]), den: Poly::constant(1.0) }
    }

    pub fn explicit(name: &str, f: impl Fn(C64) -> Result<C64> + Send + Sync + 'static) -> Self {
        PickFunction::Explicit(Arc::new(ExplicitFn {
            name: name.to_string(),
            eval: Box::new(f),
            displacement: None,
        }))
    }

    /// Explicit evaluator given through its displacement `f(z) - z`.
    pub fn explicit_displacement(
        name: &str,
        d: impl Fn(C64) -> Result<C64> + Send + Sync + Clone + 'static,
    ) -> Self {
        let d2 = d.clone();
        PickFunction::Explicit(Arc::new(ExplicitFn {
            name: name.to_string(),
            eval: Box::new(move |z| Ok(z + d2(z)?)),
            displacement: Some(Box::new(d)),
        }))
    }

    pub fn compose(outer: PickFunction, inner: PickFunction) -> Self {
        PickFunction::Composition { outer: Arc::new(outer), inner: Arc::new(inner) }
    }

    /// Measure wrapped by measure-backed variants.
    pub fn measure(&self) -> Option<&Measure> {
        match self {
            PickFunction::FromMeasureF(m) | PickFunction::FromMeasureGNeg(m) => Some(m),
            _ => None,
        }
    }

    /// Evaluation without the half-plane check.
    pub fn eval(&self, z: C64) -> Result<C64> {
        match self {
            PickFunction::FromMeasureF(m) => {
                let g = cauchy_raw(m, z);
                if g.norm() == 0.0 || !g.is_finite() {
                    return Err(Error::NumericalDomain(format!("G vanishes at {z}")));
                }
                Ok(1.0 / g)
            }
            PickFunction::FromMeasureGNeg(m) => Ok(-cauchy_raw(m, z)),
            PickFunction::Rational { num, den } => {
                let d = den.eval_c(z);
                if d.norm() == 0.0 {
                    return Err(Error::NumericalDomain(format!("pole at {z}")));
                }
                Ok(num.eval_c(z) / d)
            }
            PickFunction::Shifted { inner, outer_shift, inner_shift } => {
                Ok(inner.eval(z + inner_shift)? + outer_shift)
            }
            PickFunction::Composition { outer, inner } => outer.eval(inner.eval(z)?),
            PickFunction::LoewnerBacked { chain, s, t } => Ok(z + chain.displacement(*s, *t, z)?),
            PickFunction::Explicit(e) => (e.eval)(z),
        }
    }

    /// `f(z) - z`, evaluated without cancellation where the variant allows it.
    pub fn displacement(&self, z: C64) -> Result<C64> {
        match self {
            PickFunction::FromMeasureF(m) => {
                let g = cauchy_raw(m, z);
                if g.norm() == 0.0 || !g.is_finite() {
                    return Err(Error::NumericalDomain(format!("G vanishes at {z}")));
                }
                let k = (m.mass() - 1.0) + cauchy_first(m, z);
                Ok(-k / g)
            }
            PickFunction::Rational { num, den } => {
                let d = den.eval_c(z);
                if d.norm() == 0.0 {
                    return Err(Error::NumericalDomain(format!("pole at {z}")));
                }
                Ok(num.sub(&den.shift_up()).eval_c(z) / d)
            }
            PickFunction::Shifted { inner, outer_shift, inner_shift } => {
                Ok(inner.displacement(z + inner_shift)? + inner_shift + outer_shift)
            }
            PickFunction::Composition { outer, inner } => {
                let di = inner.displacement(z)?;
                Ok(outer.displacement(z + di)? + di)
            }
            PickFunction::LoewnerBacked { chain, s, t } => chain.displacement(*s, *t, z),
            PickFunction::Explicit(e) => match &e.displacement {
                Some(d) => d(z),
                None => Ok((e.eval)(z)? - z),
            },
            PickFunction::FromMeasureGNeg(_) => Ok(self.eval(z)? - z),
        }
    }

    /// `(f(z) - z, f'(z) - 1)`.
    pub fn displacement_d(&self, z: C64) -> Result<(C64, C64)> {
        match self {
            PickFunction::FromMeasureF(m) => {
                let (g, gp) = cauchy_with_deriv(m, z);
                if g.norm() == 0.0 || !g.is_finite() {
                    return Err(Error::NumericalDomain(format!("G vanishes at {z}")));
                }
                let k = (m.mass() - 1.0) + cauchy_first(m, z);
                Ok((-k / g, -gp / (g * g) - 1.0))
            }
            PickFunction::FromMeasureGNeg(m) => {
                let (g, gp) = cauchy_with_deriv(m, z);
                Ok((-g - z, -gp - 1.0))
            }
            PickFunction::Rational { num, den } => {
                let (n, np) = num.eval_c_d(z);
                let (d, dp) = den.eval_c_d(z);
                if d.norm() == 0.0 {
                    return Err(Error::NumericalDomain(format!("pole at {z}")));
                }
                let disp = num.sub(&den.shift_up()).eval_c(z) / d;
                Ok((disp, (np * d - n * dp) / (d * d) - 1.0))
            }
            PickFunction::Shifted { inner, outer_shift, inner_shift } => {
                let (d, dp) = inner.displacement_d(z + inner_shift)?;
                Ok((d + inner_shift + outer_shift, dp))
            }
            PickFunction::Composition { outer, inner } => {
                let (di, dpi) = inner.displacement_d(z)?;
                let (do_, dpo) = outer.displacement_d(z + di)?;
                // (1 + dpo)(1 + dpi) - 1
                Ok((do_ + di, dpo + dpi + dpo * dpi))
            }
            _ => {
                let d = self.displacement(z)?;
                let h = 1e-5 * (1.0 + z.norm()).min(z.im.max(1e-300) * 1e3).max(1e-9);
                let dp = (self.displacement(z + h)? - self.displacement(z - h)?) / (2.0 * h);
                Ok((d, dp))
            }
        }
    }
}

/// Evaluates `f`, `F` or `K` at `z` in the upper half-plane.
pub fn pick_eval(f: &PickFunction, kind: PickKind, z: C64) -> Result<C64> {
    check_upper(z)?;
    match (kind, f.measure()) {
        (PickKind::Raw, _) => f.eval(z),
        (PickKind::FOf, Some(m)) | (PickKind::KOf, Some(m)) => {
            let g = cauchy_raw(m, z);
            if g.norm() == 0.0 {
                return Err(Error::NumericalDomain(format!("G vanishes at {z}")));
            }
            if kind == PickKind::FOf {
                Ok(1.0 / g)
            } else {
                Ok(((m.mass() - 1.0) + cauchy_first(m, z)) / g)
            }
        }
        (PickKind::FOf, None) => f.eval(z),
        (PickKind::KOf, None) => Ok(-f.displacement(z)?),
    }
}

/// Truncated cone `{ Im w > a |Re w|, Im w > b }`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StolzCone {
    pub a: f64,
    pub b: f64,
}

impl StolzCone {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a > 0.0 && b > 0.0 {
            Ok(StolzCone { a, b })
        } else {
            Err(Error::InvalidArgument("cone parameters must be positive".into()))
        }
    }

    /// `a = 1`, `b = 10 (1 + sqrt(variance))`.
    pub fn auto(variance: f64) -> Self {
        StolzCone { a: 1.0, b: 10.0 * (1.0 + variance.max(0.0).sqrt()) }
    }

    pub fn contains(&self, w: C64) -> bool {
        w.im > self.a * w.re.abs() && w.im > self.b
    }
}

/// Nevanlinna triple `f(z) = α + βz + ∫ (1/(x-z) - x/(1+x²)) ρ(dx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NevanlinnaData {
    pub alpha: f64,
    pub beta: f64,
    pub rho: Measure,
}

impl NevanlinnaData {
    /// Evaluates the integral representation.
    pub fn eval(&self, z: C64) -> C64 {
        let shift: f64 = self
            .rho
            .atoms
            .iter()
            .map(|a| a.weight * a.location / (1.0 + a.location * a.location))
            .sum::<f64>()
            + self.rho.density.as_ref().map_or(0.0, |d| {
                (0..d.len())
                    .map(|k| d.weight(k) * d.values[k] * d.x(k) / (1.0 + d.x(k) * d.x(k)))
                    .sum()
            });
        self.alpha + self.beta * z - cauchy_raw(&self.rho, z) - shift
    }
}

/// Mean, angular residue and characteristic measure of an element of 𝒫².
#[derive(Debug, Clone, PartialEq)]
pub struct P2Data {
    pub m: f64,
    pub r: f64,
    pub rho_f: Measure,
}

/// How cell masses are placed on grid nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binning {
    /// Node value = mass of its dual cell / trapezoid weight.
    CellMass,
    /// Each cell mass is split between the two nodes bracketing its barycenter,
    /// preserving mass and first moment.
    Barycentric,
}

/// Tuning for [`stieltjes_invert_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct StieltjesOptions {
    pub n_grid: usize,
    pub y_levels: Option<Vec<f64>>,
    pub binning: Binning,
    /// Atoms below `atom_tol_rel * mass` stay in the density.
    pub atom_tol_rel: f64,
    pub detect_atoms: bool,
    /// Relative mass leak that raises `WindowTooSmall`.
    pub leak_tol: f64,
}

impl Default for StieltjesOptions {
    fn default() -> Self {
        StieltjesOptions {
            n_grid: 2048,
            y_levels: None,
            binning: Binning::CellMass,
            atom_tol_rel: 1e-4,
            detect_atoms: true,
            leak_tol: 0.05,
        }
    }
}

impl StieltjesOptions {
    pub fn with_grid(n_grid: usize) -> Self {
        StieltjesOptions { n_grid, ..Default::default() }
    }
}

/// Cauchy-transform evaluator accepted by the inversion routines.
pub type CauchyFn<'a> = dyn Fn(C64) -> Result<C64> + Sync + 'a;

/// Recovers a measure from its Cauchy transform on `window`.
pub fn stieltjes_invert(
    g: &CauchyFn<'_>,
    window: (f64, f64),
    n_grid: usize,
    y_levels: &[f64],
) -> Result<Measure> {
    let opts = StieltjesOptions {
        n_grid,
        y_levels: (!y_levels.is_empty()).then(|| y_levels.to_vec()),
        ..Default::default()
    };
    stieltjes_invert_with(g, window, &opts)
}

/// Total mass from `y (-Im g(c + iy))` at large `y`.
fn mass_estimate(g: &CauchyFn<'_>, center: f64, scale: f64) -> Result<f64> {
    let y = 1e3 * (1.0 + scale);
    let ys = [y, 2.0 * y, 4.0 * y];
    let a: Vec<f64> = ys.iter().map(|&t| Ok(t * -g(ci(center, t))?.im)).collect::<Result<_>>()?;
    let hs: Vec<f64> = ys.iter().map(|t| 1.0 / (t * t)).collect();
    Ok(neville_zero(&hs, &a).0)
}

struct AtomSearch<'a> {
    g: &'a CauchyFn<'a>,
    y_floor: f64,
}

impl AtomSearch<'_> {
    /// Follows a candidate peak down to the real axis; returns the atom if the
    /// weight estimate settles above `tol`.
    fn refine(&self, x_start: f64, y_start: f64, tol: f64, excised: &[Atom]) -> Option<Atom> {
        let eval = |z: C64| -> Option<C64> {
            let mut v = (self.g)(z).ok()?;
            for a in excised {
                v -= a.weight / (z - a.location);
            }
            v.is_finite().then_some(v)
        };
        let mut x = x_start;
        let mut y = y_start;
        let mut hist: Vec<(f64, f64)> = Vec::new();
        while y > self.y_floor {
            y *= 0.5;
            let mut w = 0.0;
            for _ in 0..4 {
                let q = 1.0 / eval(ci(x, y))?;
                if !(q.im > 0.0) {
                    return None;
                }
                let step = (y * q.re / q.im).clamp(-5.0 * y, 5.0 * y);
                x -= step;
                w = y / q.im;
                if step.abs() <= 1e-3 * y {
                    break;
                }
            }
            let q = 1.0 / eval(ci(x, y))?;
            if q.im > 0.0 {
                w = y / q.im;
            }
            hist.push((y, w));
            let n = hist.len();
            if n >= 3 {
                let (w0, w1, w2) = (hist[n - 3].1, hist[n - 2].1, hist[n - 1].1);
                let c1 = (w1 - w0).abs() / w2.abs().max(1e-300);
                let c2 = (w2 - w1).abs() / w2.abs().max(1e-300);
                if c2 < 1e-10 || (c1 < 1e-3 && c2 < 1e-3 && y < 1e-6 * y_start) {
                    break;
                }
                if n >= 8 && c2 > 0.05 {
                    return None;
                }
            }
        }
        let n = hist.len();
        if n < 3 {
            return None;
        }
        let (w1, w2) = (hist[n - 2].1, hist[n - 1].1);
        if (w2 - w1).abs() > 1e-3 * w2.abs() {
            return None;
        }
        // w(y) = w + c y: one Richardson step.
        let w = 2.0 * w2 - w1;
        // A genuine pole carries its weight in y(-Im g) at the final height.
        let y_last = hist[n - 1].0;
        let a = y_last * -eval(ci(x, y_last))?.im;
        if (a - w2).abs() > 1e-2 * w2.abs() {
            return None;
        }
        (w > tol).then_some(Atom::new(x, w))
    }
}

fn default_y_levels(width: f64, dx: f64) -> Vec<f64> {
    let base = (1e-8 * width.max(1.0)).min(1e-3 * dx).max(2e-11);
    vec![4.0 * base, 2.0 * base, base]
}

/// Graded panels on `[lo, hi]` refined geometrically toward `lo`.
fn graded_panels(lo: f64, hi: f64, ratio: f64) -> Vec<(f64, f64)> {
    let mut v = Vec::new();
    let mut top = hi;
    while top > lo {
        let bot = (top * ratio).max(lo);
        let bot = if bot < lo * 1.5 { lo } else { bot };
        v.push((bot, top));
        top = bot;
    }
    v
}

/// Recovers a measure from its Cauchy transform, with explicit options.
pub fn stieltjes_invert_with(
    g: &CauchyFn<'_>,
    window: (f64, f64),
    opts: &StieltjesOptions,
) -> Result<Measure> {
    let (lo, hi) = window;
    if !(hi > lo) || opts.n_grid < 3 {
        return Err(Error::InvalidArgument("window must be nonempty with n_grid >= 3".into()));
    }
    let n = opts.n_grid;
    let width = hi - lo;
    let dx = width / (n - 1) as f64;
    let center = 0.5 * (lo + hi);
    let mass = mass_estimate(g, center, width + center.abs())?;
    if !(mass > 1e-14) {
        return Ok(Measure::zero());
    }
    let y_levels = match &opts.y_levels {
        Some(v) => {
            if v.iter().any(|&y| !(y > 0.0)) || v.windows(2).any(|p| p[1] >= p[0]) {
                return Err(Error::InvalidArgument("y_levels must be positive and decreasing".into()));
            }
            v.clone()
        }
        None => default_y_levels(width, dx),
    };
    let y_min = *y_levels.last().unwrap();
    let atom_tol = opts.atom_tol_rel * mass;

    // Atoms.
    let mut atoms: Vec<Atom> = Vec::new();
    if opts.detect_atoms {
        let search = AtomSearch { g, y_floor: (y_min * 1e-2).max(1e-11 * (1.0 + center.abs() + width)) };
        let y_det = 2.0 * dx;
        for _pass in 0..3 {
            let excised = atoms.clone();
            let a: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|k| {
                    let z = ci(lo + k as f64 * dx, y_det);
                    let mut v = g(z).unwrap_or(ci(0.0, 0.0));
                    for t in &excised {
                        v -= t.weight / (z - t.location);
                    }
                    y_det * -v.im
                })
                .collect();
            let cands: Vec<usize> = (0..n)
                .filter(|&k| {
                    let l = if k > 0 { a[k - 1] } else { f64::NEG_INFINITY };
                    let r = if k + 1 < n { a[k + 1] } else { f64::NEG_INFINITY };
                    a[k] > atom_tol && a[k] >= l && a[k] >= r && (a[k] > l || a[k] > r)
                })
                .collect();
            let found: Vec<Atom> = cands
                .par_iter()
                .filter_map(|&k| search.refine(lo + k as f64 * dx, y_det, atom_tol, &excised))
                .collect();
            let mut new = 0;
            for f in found {
                if f.location < lo - 0.5 * dx || f.location > hi + 0.5 * dx {
                    continue;
                }
                let dup = atoms
                    .iter()
                    .any(|a| (a.location - f.location).abs() <= 1e-7 * (1.0 + f.location.abs()) + 1e-3 * dx);
                if !dup {
                    atoms.push(f);
                    new += 1;
                }
            }
            if new == 0 {
                break;
            }
        }
    }
    let excised = atoms.clone();
    let gc = |z: C64| -> Result<C64> {
        let mut v = g(z)?;
        for a in &excised {
            v -= a.weight / (z - a.location);
        }
        Ok(v)
    };

    // Cell boundaries.
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(lo);
    for j in 1..n {
        edges.push(lo + (j as f64 - 0.5) * dx);
    }
    edges.push(hi);
    let top = 4.0 * dx;
    let y0 = y_levels[0];
    let mut pieces: Vec<Vec<(f64, f64)>> = vec![graded_panels(y0, top, 1.0 / 3.0)];
    for w in y_levels.windows(2) {
        pieces.push(graded_panels(w[1], w[0], 1.0 / 3.0));
    }
    let nl = y_levels.len();
    // Leg integrals of Re g and Re(z g) at each level.
    let legs: Vec<Vec<(f64, f64)>> = edges
        .par_iter()
        .map(|&e| -> Result<Vec<(f64, f64)>> {
            let mut acc = (0.0, 0.0);
            let mut out = Vec::with_capacity(nl);
            for piece in &pieces {
                for &(a, b) in piece {
                    for (s, w) in gauss_on(8, a, b) {
                        let z = ci(e, s);
                        let v = gc(z)?;
                        acc.0 += w * v.re;
                        acc.1 += w * (z * v).re;
                    }
                }
                out.push(acc);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    // Top segment of each cell.
    let tops: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| -> Result<(f64, f64)> {
            let (a, b) = (edges[k], edges[k + 1]);
            let mut t = (0.0, 0.0);
            for (x, w) in gauss_on(3, a, b) {
                let z = ci(x, top);
                let v = gc(z)?;
                t.0 += w * v.im;
                t.1 += w * (z * v).im;
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut cell_mass = vec![0.0; n];
    let mut cell_m1 = vec![0.0; n];
    let hs: Vec<f64> = y_levels.clone();
    for k in 0..n {
        let mut m0 = Vec::with_capacity(nl);
        let mut m1 = Vec::with_capacity(nl);
        for l in 0..nl {
            m0.push(-(tops[k].0 + legs[k][l].0 - legs[k + 1][l].0) / PI);
            m1.push(-(tops[k].1 + legs[k][l].1 - legs[k + 1][l].1) / PI);
        }
        let (v0, _) = neville_zero(&hs, &m0);
        let (v1, _) = neville_zero(&hs, &m1);
        cell_mass[k] = v0.max(0.0);
        cell_m1[k] = v1;
    }
    let mut dens = GridDensity::new(lo, dx, vec![0.0; n]);
    match opts.binning {
        Binning::CellMass => {
            for k in 0..n {
                dens.values[k] = cell_mass[k] / dens.weight(k);
            }
        }
        Binning::Barycentric => {
            let mut q = vec![0.0; n];
            for k in 0..n {
                let m = cell_mass[k];
                if m <= 0.0 {
                    continue;
                }
                let xk = dens.x(k);
                let c = (cell_m1[k] / m).clamp(edges[k], edges[k + 1]);
                let th = (c - xk) / dx;
                if th > 0.0 && k + 1 < n {
                    q[k] += m * (1.0 - th);
                    q[k + 1] += m * th;
                } else if th < 0.0 && k > 0 {
                    q[k] += m * (1.0 + th);
                    q[k - 1] -= m * th;
                } else {
                    q[k] += m;
                }
            }
            for k in 0..n {
                dens.values[k] = q[k] / dens.weight(k);
            }
        }
    }
    let has_density = dens.values.iter().any(|&v| v > 0.0);
    let out = Measure { atoms, density: has_density.then_some(dens) };
    let out = canonicalize(&out, default_merge_tol(&out))?;
    let leak = (mass - out.mass()) / mass;
    if leak > opts.leak_tol {
        return Err(Error::WindowTooSmall { leak });
    }
    Ok(out)
}

/// Moments of the measure behind `g` read off the expansion at `i∞`.
/// Returns `(mass, mean, variance)`; a real additive constant in `g` is tolerated.
fn moments_at_infinity(g: &CauchyFn<'_>) -> Result<(f64, f64, f64)> {
    let mut y = 8.0;
    for _ in 0..12 {
        let ys = [y, 2.0 * y, 4.0 * y, 8.0 * y];
        let vals: Vec<C64> = ys.iter().map(|&t| g(ci(0.0, t))).collect::<Result<_>>()?;
        // y(-Im g) = M - M2/y^2 + ...
        let a: Vec<f64> = ys.iter().zip(&vals).map(|(t, v)| t * -v.im).collect();
        let hs: Vec<f64> = ys.iter().map(|t| 1.0 / (t * t)).collect();
        let (m, err) = neville_zero(&hs, &a);
        if err <= 1e-6 * m.abs().max(1e-300) || y > 1e7 {
            if !(m > 0.0) {
                return Ok((0.0, 0.0, 0.0));
            }
            // M2 from the slope in h; M1 from Re differences.
            let slope: Vec<f64> = a.iter().zip(&hs).map(|(v, h)| (m - v) / h).collect();
            let (m2, _) = neville_zero(&hs, &slope);
            let d: Vec<f64> = (1..4)
                .map(|i| (vals[i].re - vals[0].re) / (hs[i] - hs[0]))
                .collect();
            let (m1, _) = neville_zero(&hs[1..], &d);
            let mean = m1 / m;
            let var = (m2 / m - mean * mean).max(0.0);
            return Ok((m, mean, var));
        }
        y *= 4.0;
    }
    Err(Error::NumericalDomain("moment expansion at infinity did not settle".into()))
}

/// Inversion with a window inferred from the expansion at `i∞`, widened on leak.
pub(crate) fn invert_auto(g: &CauchyFn<'_>, opts: &StieltjesOptions) -> Result<Measure> {
    let (mass, mean, var) = moments_at_infinity(g)?;
    if mass <= 1e-14 {
        return Ok(Measure::zero());
    }
    let sd = var.sqrt();
    let mut half = 10.0 * sd + 1e-3 * (1.0 + mean.abs());
    for _ in 0..8 {
        match stieltjes_invert_with(g, (mean - half, mean + half), opts) {
            Err(Error::WindowTooSmall { .. }) => half *= 2.0,
            other => return other,
        }
    }
    stieltjes_invert_with(g, (mean - half, mean + half), opts)
}

/// Nevanlinna data of a Pick function.
pub fn nevanlinna_extract(f: &PickFunction) -> Result<NevanlinnaData> {
    nevanlinna_extract_with(f, &StieltjesOptions::with_grid(1024))
}

pub fn nevanlinna_extract_with(f: &PickFunction, opts: &StieltjesOptions) -> Result<NevanlinnaData> {
    let alpha = f.eval(ci(0.0, 1.0))?.re;
    let ys: Vec<f64> = (3..=8).map(|k| 10f64.powi(k)).collect();
    let b: Vec<f64> = ys
        .iter()
        .map(|&y| Ok(f.eval(ci(0.0, y))?.im / y))
        .collect::<Result<_>>()?;
    let (b7, b8) = (b[4], b[5]);
    let change = (b8 - b7).abs() / b8.abs().max(1.0);
    if change > 1e-4 {
        return Err(Error::NonconvergentDerivativeAtInfinity(change));
    }
    let beta = (b8 + (b8 - b7) / 99.0).max(0.0);
    let g = move |z: C64| -> Result<C64> { Ok(beta * z - f.eval(z)?) };
    let rho = invert_auto(&g, opts)?;
    Ok(NevanlinnaData { alpha, beta, rho })
}

/// `(m, r)` of an element of 𝒫² from the expansion along the imaginary axis.
pub fn p2_scalars(f: &PickFunction) -> Result<(f64, f64)> {
    let mut y0 = 2.0;
    let mut best: Option<(f64, f64, f64)> = None;
    for _ in 0..20 {
        let ys: Vec<f64> = (0..5).map(|k| y0 * 2f64.powi(k)).collect();
        let hs: Vec<f64> = ys.iter().map(|y| 1.0 / (y * y)).collect();
        let d: Vec<C64> = ys
            .iter()
            .map(|&y| f.displacement(ci(0.0, y)))
            .collect::<Result<_>>()?;
        let ms: Vec<f64> = d.iter().map(|v| -v.re).collect();
        let rs: Vec<f64> = d.iter().zip(&ys).map(|(v, y)| y * v.im).collect();
        let top = *ys.last().unwrap();
        if (d[4].im / top).abs() > 1e-3 * (1.0 + rs[4].abs() / (top * top)) && top > 1e3 {
            return Err(Error::NotP2(format!("Im f(iy)/y does not tend to 1 (y = {top})")));
        }
        let (m, em) = neville_zero(&hs, &ms);
        let (r, er) = neville_zero(&hs, &rs);
        let err = (em / (1.0 + m.abs())).max(er / (1.0 + r.abs()));
        if best.map_or(true, |b| err < b.2) {
            best = Some((m, r, err));
        }
        if err <= 1e-10 {
            break;
        }
        y0 *= 2.0;
    }
    let (m, r, err) = best.unwrap();
    if err > 1e-6 || !r.is_finite() || r < -1e-9 {
        return Err(Error::NotP2(format!("residue expansion did not converge (err {err:.2e})")));
    }
    Ok((m, r.max(0.0)))
}

/// Mean, angular residue and characteristic measure of `f ∈ 𝒫²`.
pub fn p2_analyze(f: &PickFunction) -> Result<P2Data> {
    p2_analyze_with(f, &StieltjesOptions::with_grid(1024), None)
}

/// As [`p2_analyze`] with explicit inversion options and optional window.
pub fn p2_analyze_with(
    f: &PickFunction,
    opts: &StieltjesOptions,
    window: Option<(f64, f64)>,
) -> Result<P2Data> {
    let (m, r) = p2_scalars(f)?;
    if r <= 1e-14 {
        return Ok(P2Data { m, r, rho_f: Measure::zero() });
    }
    let g = move |z: C64| -> Result<C64> { Ok(-f.displacement(z)? - m) };
    let rho_f = match window {
        Some(w) => stieltjes_invert_with(&g, w, opts)?,
        None => invert_auto(&g, opts)?,
    };
    Ok(P2Data { m, r, rho_f })
}

/// Newton solve of `f(ζ) = w` started at `ζ0`; returns `ζ - w`.
pub(crate) fn newton_invert_delta(f: &PickFunction, w: C64, zeta0: C64) -> Result<C64> {
    let tol = 1e-12 * (1.0 + w.norm());
    let mut delta = zeta0 - w;
    let residual = |d: C64| -> Result<(C64, C64)> {
        let (disp, dp) = f.displacement_d(w + d)?;
        Ok((d + disp, dp))
    };
    let (mut r, mut dp) = residual(delta)?;
    let mut polish = 0;
    for _ in 0..200 {
        if r.norm() <= tol {
            // Near a critical value convergence is linear; keep going while it helps.
            polish += 1;
            if polish > 60 || r.norm() == 0.0 {
                return Ok(delta);
            }
        }
        let step = r / (1.0 + dp);
        if !step.is_finite() {
            break;
        }
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = delta - lam * step;
            if (w + cand).im > 0.0 {
                if let Ok((rn, dpn)) = residual(cand) {
                    if rn.norm() < r.norm() || (lam < 1e-6 && polish == 0) {
                        delta = cand;
                        r = rn;
                        dp = dpn;
                        accepted = true;
                        break;
                    }
                }
            }
            lam *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if r.norm() <= tol {
        Ok(delta)
    } else {
        Err(Error::OutOfCone(format!("no convergence for w = {w} (residual {:.2e})", r.norm())))
    }
}

/// Right inverse of `f` at `w ∈ Γ_cone`.
pub fn pick_invert(f: &PickFunction, w: C64, cone: &StolzCone) -> Result<C64> {
    if !cone.contains(w) {
        return Err(Error::OutOfCone(format!("{w} is outside the cone")));
    }
    Ok(w + newton_invert_delta(f, w, w)?)
}

/// Voiculescu transform `φ_μ(z) = F_μ^{-1}(z) - z`.
pub fn voiculescu_eval(m: &Measure, z: C64, cone: &StolzCone) -> Result<C64> {
    if !cone.contains(z) {
        return Err(Error::OutOfCone(format!("{z} is outside the cone")));
    }
    let f = PickFunction::FromMeasureF(Arc::new(m.clone()));
    newton_invert_delta(&f, z, z)
}

/// CSV rows `x,density` of the density part.
pub fn density_csv(m: &Measure) -> String {
    let mut s = String::from("x,density\n");
    if let Some(d) = &m.density {
        for k in 0..d.len() {
            s.push_str(&format!("{:.16e},{:.16e}\n", d.x(k), d.values[k]));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn cauchy_of_small_examples() {
        assert!((cauchy_eval(&Measure::dirac(0.0), c(0.0, 1.0)).unwrap() - c(0.0, -1.0)).norm() < 1e-15);
        let b = Measure::discrete(&[(-1.0, 0.5), (1.0, 0.5)]).unwrap();
        assert!((cauchy_eval(&b, c(0.0, 2.0)).unwrap() - c(0.0, -0.4)).norm() < 1e-15);
        assert!(matches!(cauchy_eval(&b, c(0.0, 0.0)), Err(Error::OutOfHalfPlane(_))));
    }

    #[test]
    fn f_and_k_of_bernoulli() {
        let b = PickFunction::from_measure(Measure::discrete(&[(-1.0, 0.5), (1.0, 0.5)]).unwrap());
        let k = pick_eval(&b, PickKind::KOf, c(0.0, 2.0)).unwrap();
        assert!((k - c(0.0, -0.5)).norm() < 1e-15);
        let f = pick_eval(&PickFunction::from_measure(Measure::dirac(0.7)), PickKind::FOf, c(0.2, 1.0)).unwrap();
        assert!((f - c(-0.5, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn near_field_density_matches_quadrature() {
        let m = Measure::from_fn(-1.0, 1.0, 201, |x| 1.0 - x.abs()).unwrap();
        let z = c(0.013, 0.004);
        let g = cauchy_raw(&m, z);
        // Brute-force quadrature of the interpolant.
        let d = m.density.as_ref().unwrap();
        let mut s = c(0.0, 0.0);
        for k in 0..d.len() - 1 {
            for p in 0..8 {
                let a = d.x(k) + p as f64 * d.dx / 8.0;
                for (x, w) in gauss_on(20, a, a + d.dx / 8.0) {
                    s += w * d.eval(x) / (z - x);
                }
            }
        }
        assert!((g - s).norm() < 1e-10 * s.norm(), "{g} vs {s}");
        let zf = c(0.4, 0.3);
        let mut sf = c(0.0, 0.0);
        for k in 0..d.len() - 1 {
            for (x, w) in gauss_on(20, d.x(k), d.x(k + 1)) {
                sf += w * d.eval(x) / (zf - x);
            }
        }
        assert!((cauchy_raw(&m, zf) - sf).norm() < 1e-12 * sf.norm());
        let (_, gp) = cauchy_with_deriv(&m, z);
        let h = 1e-7;
        let fd = (cauchy_raw(&m, z + h) - cauchy_raw(&m, z - h)) / (2.0 * h);
        assert!((gp - fd).norm() < 1e-5 * gp.norm());
    }

    #[test]
    fn invert_dirac() {
        let g = |z: C64| -> Result<C64> { Ok(1.0 / z) };
        let m = stieltjes_invert(&g, (-1.0, 1.0), 201, &[]).unwrap();
        assert_eq!(m.atoms.len(), 1);
        assert!(m.atoms[0].location.abs() < 1e-9);
        assert!((m.atoms[0].weight - 1.0).abs() < 1e-6);
        assert!(m.density_mass() < 1e-9);
    }

    #[test]
    fn window_too_small_is_reported() {
        let g = |z: C64| -> Result<C64> { Ok(0.5 / (z - 3.0) + 0.5 / (z + 0.2)) };
        assert!(matches!(
            stieltjes_invert(&g, (-1.0, 1.0), 101, &[]),
            Err(Error::WindowTooSmall { .. })
        ));
    }

    #[test]
    fn pick_invert_quadratic() {
        let f = PickFunction::Rational { num: Poly::new(vec![-1.0, 0.0, 1.0]), den: Poly::new(vec![0.0, 1.0]) };
        let cone = StolzCone::new(1.0, 1.0).unwrap();
        // 2i is a critical value of z - 1/z: the residual is tight, the root only to ~sqrt(eps).
        let z = pick_invert(&f, c(0.0, 2.0), &cone).unwrap();
        assert!((f.eval(z).unwrap() - c(0.0, 2.0)).norm() < 1e-12);
        assert!((z - c(0.0, 1.0)).norm() < 1e-7);
        let z = pick_invert(&f, c(0.5, 3.0), &cone).unwrap();
        assert!((f.eval(z).unwrap() - c(0.5, 3.0)).norm() < 1e-12);
        let t = PickFunction::translation(0.3);
        let z = pick_invert(&t, c(0.5, 4.0), &cone).unwrap();
        assert!((z - c(0.8, 4.0)).norm() < 1e-13);
    }

    #[test]
    fn voiculescu_of_dirac_and_bernoulli() {
        let cone = StolzCone::new(1.0, 1.0).unwrap();
        let v = voiculescu_eval(&Measure::dirac(0.4), c(0.1, 3.0), &cone).unwrap();
        assert!((v - c(0.4, 0.0)).norm() < 1e-13);
        let b = Measure::discrete(&[(-1.0, 0.5), (1.0, 0.5)]).unwrap();
        let v = voiculescu_eval(&b, c(0.0, 2.0), &cone).unwrap();
        assert!((v - c(0.0, -1.0)).norm() < 1e-7);
        let z = c(0.3, 2.5);
        let v = voiculescu_eval(&b, z, &cone).unwrap();
        let e = (-z + (z * z + 4.0).sqrt()) / 2.0;
        assert!((v - e).norm() < 1e-12, "{v} {e}");
    }

    #[test]
    fn p2_of_simple_maps() {
        let (m, r) = p2_scalars(&PickFunction::translation(5.0)).unwrap();
        assert!((m - 5.0).abs() < 1e-12 && r.abs() < 1e-12);
        // z + 1/(1 - z)
        let f = PickFunction::Rational {
            num: Poly::new(vec![1.0, 1.0, -1.0]),
            den: Poly::new(vec![1.0, -1.0]),
        };
        let p = p2_analyze(&f).unwrap();
        assert!(p.m.abs() < 1e-9 && (p.r - 1.0).abs() < 1e-9);
        assert_eq!(p.rho_f.atoms.len(), 1);
        assert!((p.rho_f.atoms[0].location - 1.0).abs() < 1e-8);
    }

    #[test]
    fn not_p2_detected() {
        let f = PickFunction::Rational { num: Poly::new(vec![0.0, 2.0]), den: Poly::constant(1.0) };
        assert!(matches!(p2_scalars(&f), Err(Error::NotP2(_))));
    }
}
