//! Generating families and the classical, free, boolean and monotone
//! convolution hemigroups they generate.

use crate::convolutions::{finish_discrete, invert_widening, poles_with_residues, ConvKind};
use crate::error::{Error, Result};
use crate::loewner::{DrivingSpec, LoewnerChain, Segment};
use crate::measures::{levy_distance, moment, GridDensity, Measure};
use crate::poly::{complex_roots, Poly};
use crate::quad::gauss_on;
use crate::transforms::{p2_analyze_with, stieltjes_invert_with, Binning, PickFunction, StieltjesOptions};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};

const TIME_EPS: f64 = 1e-12;

/// Coordinates of the Lévy–Khintchine data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyForm {
    /// `(m_t, κ_t)`.
    Reduced,
    /// `(γ_t, η_t)` with `κ = (1 + x²) η` and `m = γ + ∫ x dη`.
    Full,
}

/// Fixed atom location with its weight at every grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAtom {
    pub x: f64,
    pub weights: Vec<f64>,
}

/// Piecewise-linear generating family on a time grid.
///
/// `m` holds the drift (`m_t` or `γ_t`) at each node, the atoms hold `κ_t`
/// (or `η_t`) weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratingFamily {
    pub grid: Vec<f64>,
    pub m: Vec<f64>,
    pub atoms: Vec<FamilyAtom>,
    pub form: FamilyForm,
}

/// Increment of a family between two times, in one of the two coordinate systems.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub drift: f64,
    /// `(x_j, Δw_j)`, only strictly positive increments.
    pub atoms: Vec<(f64, f64)>,
    pub form: FamilyForm,
}

impl Increment {
    pub fn to_reduced(&self) -> Increment {
        match self.form {
            FamilyForm::Reduced => self.clone(),
            FamilyForm::Full => Increment {
                drift: self.drift + self.atoms.iter().map(|(x, w)| x * w).sum::<f64>(),
                atoms: self.atoms.iter().map(|&(x, w)| (x, (1.0 + x * x) * w)).collect(),
                form: FamilyForm::Reduced,
            },
        }
    }

    /// `κ(ℝ)` of the increment.
    pub fn variance(&self) -> f64 {
        self.to_reduced().atoms.iter().map(|a| a.1).sum()
    }

    pub fn is_pure_drift(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `φ(z) = m + ∫ κ(dx)/(z-x)`, or `γ + ∫ (1+xz)/(z-x) η(dx)`, and its derivative.
    pub fn phi(&self, z: C64) -> (C64, C64) {
        let mut v = C64::new(self.drift, 0.0);
        let mut d = C64::new(0.0, 0.0);
        for &(x, w) in &self.atoms {
            let r = 1.0 / (z - x);
            match self.form {
                FamilyForm::Reduced => {
                    v += w * r;
                    d -= w * r * r;
                }
                FamilyForm::Full => {
                    v += w * (1.0 + x * z) * r;
                    d -= w * (1.0 + x * x) * r * r;
                }
            }
        }
        (v, d)
    }

    fn hull(&self) -> (f64, f64) {
        self.atoms.iter().fold((0.0f64, 0.0f64), |(lo, hi), a| (lo.min(a.0), hi.max(a.0)))
    }
}

impl GeneratingFamily {
    /// Family with constant slopes on `[0, t_end]`: `m_t = drift·t`, `κ_t = Σ rate_j t δ_{x_j}`.
    pub fn linear(t_end: f64, drift: f64, rates: &[(f64, f64)]) -> Result<Self> {
        let f = GeneratingFamily {
            grid: vec![0.0, t_end],
            m: vec![0.0, drift * t_end],
            atoms: rates
                .iter()
                .map(|&(x, r)| FamilyAtom { x, weights: vec![0.0, r * t_end] })
                .collect(),
            form: FamilyForm::Reduced,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: GeneratingFamily =
            serde_json::from_str(s).map_err(|e| Error::InvalidFamily(format!("bad JSON: {e}")))?;
        f.validate()?;
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("family serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.grid.len();
        if k < 2 {
            return Err(Error::InvalidFamily("grid needs at least two nodes".into()));
        }
        if self.grid[0] != 0.0 {
            return Err(Error::InvalidFamily("grid must start at 0".into()));
        }
        if self.grid.windows(2).any(|w| !(w[1] > w[0])) || !self.grid[k - 1].is_finite() {
            return Err(Error::InvalidFamily("grid must be strictly increasing".into()));
        }
        if self.m.len() != k || self.m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFamily("drift needs one finite value per node".into()));
        }
        if self.m[0] != 0.0 {
            return Err(Error::InvalidFamily("drift must vanish at t = 0".into()));
        }
        for (j, a) in self.atoms.iter().enumerate() {
            if !a.x.is_finite() || a.weights.len() != k {
                return Err(Error::InvalidFamily(format!("atom {j} needs one weight per node")));
            }
            if a.weights[0] != 0.0 {
                return Err(Error::InvalidFamily(format!("atom {j} must start with weight 0")));
            }
            if a.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return Err(Error::InvalidFamily(format!("atom {j} has a negative weight")));
            }
            if a.weights.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvalidFamily(format!("atom {j} weights decrease")));
            }
        }
        Ok(())
    }

    pub fn t_end(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    fn check_times(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        let te = self.t_end();
        let tol = TIME_EPS * (1.0 + te);
        if !(s >= -tol && s <= t + tol && t <= te + tol) {
            return Err(Error::InvalidArgument(format!("need 0 <= s <= t <= {te}, got s = {s}, t = {t}")));
        }
        let t = t.clamp(0.0, te);
        Ok((s.clamp(0.0, t), t))
    }

    /// Segment index and linear weight of `t`.
    fn locate(&self, t: f64) -> (usize, f64) {
        let k = self.grid.len();
        let i = self.grid.partition_point(|&g| g <= t).clamp(1, k - 1) - 1;
        let th = ((t - self.grid[i]) / (self.grid[i + 1] - self.grid[i])).clamp(0.0, 1.0);
        (i, th)
    }

    fn interp(&self, v: &[f64], t: f64) -> f64 {
        let (i, th) = self.locate(t);
        v[i] + th * (v[i + 1] - v[i])
    }

    pub fn drift_at(&self, t: f64) -> f64 {
        self.interp(&self.m, t)
    }

    pub fn weight_at(&self, j: usize, t: f64) -> f64 {
        self.interp(&self.atoms[j].weights, t)
    }

    /// Increment on `[s, t]` in the family's own coordinates.
    pub fn increment(&self, s: f64, t: f64) -> Result<Increment> {
        let (s, t) = self.check_times(s, t)?;
        let atoms = (0..self.atoms.len())
            .filter_map(|j| {
                let dw = self.weight_at(j, t) - self.weight_at(j, s);
                (dw > 0.0).then(|| (self.atoms[j].x, dw))
            })
            .collect();
        Ok(Increment { drift: self.drift_at(t) - self.drift_at(s), atoms, form: self.form })
    }

    /// Increment on `[s, t]` in reduced coordinates.
    pub fn reduced_increment(&self, s: f64, t: f64) -> Result<Increment> {
        Ok(self.increment(s, t)?.to_reduced())
    }

    /// `(ṁ_s, [(x_j, κ̇_j)])` in reduced coordinates.
    pub fn slopes(&self, s: f64) -> Result<(f64, Vec<(f64, f64)>)> {
        let te = self.t_end();
        if !(0.0..=te).contains(&s) {
            return Err(Error::InvalidArgument(format!("time {s} outside [0, {te}]")));
        }
        if self.grid.iter().any(|&g| (g - s).abs() <= TIME_EPS * (1.0 + te)) {
            return Err(Error::AmbiguousSlope(s));
        }
        let (i, _) = self.locate(s);
        let inc = self.reduced_increment(self.grid[i], self.grid[i + 1])?;
        let dt = self.grid[i + 1] - self.grid[i];
        Ok((inc.drift / dt, inc.atoms.iter().map(|&(x, w)| (x, w / dt)).collect()))
    }

    /// Piecewise-constant driving data of the monotone hemigroup.
    pub fn to_driving_spec(&self) -> Result<DrivingSpec> {
        let mut segments = Vec::with_capacity(self.grid.len() - 1);
        for i in 0..self.grid.len() - 1 {
            let (t0, t1) = (self.grid[i], self.grid[i + 1]);
            let dt = t1 - t0;
            let inc = self.reduced_increment(t0, t1)?;
            let lambda: f64 = inc.atoms.iter().map(|a| a.1).sum();
            let kernel = if lambda > 0.0 {
                let pairs: Vec<(f64, f64)> = inc.atoms.iter().map(|&(x, w)| (x, w / lambda)).collect();
                Measure::discrete(&pairs)?
            } else {
                Measure::dirac(0.0)
            };
            segments.push(Segment { t0, t1, rate: lambda / dt, drift: inc.drift / dt, kernel });
        }
        Ok(DrivingSpec { segments })
    }
}

/// Node-wise conversion between full and reduced coordinates.
pub fn family_convert(f: &GeneratingFamily, to: FamilyForm) -> GeneratingFamily {
    if f.form == to {
        return f.clone();
    }
    let k = f.grid.len();
    let mut out = f.clone();
    out.form = to;
    for i in 0..k {
        let mut shift = 0.0;
        for (a, b) in f.atoms.iter().zip(out.atoms.iter_mut()) {
            let c = 1.0 + a.x * a.x;
            match to {
                FamilyForm::Reduced => {
                    b.weights[i] = c * a.weights[i];
                    shift += a.x * a.weights[i];
                }
                FamilyForm::Full => {
                    b.weights[i] = a.weights[i] / c;
                    shift -= a.x * b.weights[i];
                }
            }
        }
        out.m[i] = f.m[i] + shift;
    }
    out
}

/// A convolution hemigroup of the given kind, generated by a family.
#[derive(Debug, Clone)]
pub struct CHHandle {
    pub family: GeneratingFamily,
    pub kind: ConvKind,
    chain: OnceLock<Arc<LoewnerChain>>,
}

impl CHHandle {
    pub fn new(family: GeneratingFamily, kind: ConvKind) -> Result<Self> {
        family.validate()?;
        if kind == ConvKind::Monotone && family.form != FamilyForm::Reduced {
            return Err(Error::InvalidFamily("monotone hemigroups take reduced families".into()));
        }
        Ok(CHHandle { family, kind, chain: OnceLock::new() })
    }

    /// Loewner chain realizing the monotone hemigroup.
    pub fn chain(&self) -> Result<Arc<LoewnerChain>> {
        if let Some(c) = self.chain.get() {
            return Ok(c.clone());
        }
        let c = Arc::new(LoewnerChain::new(self.family.to_driving_spec()?)?);
        Ok(self.chain.get_or_init(|| c).clone())
    }

    /// `F_{μ_{s,t}}` as a Pick function (not available for the classical kind).
    pub fn pick(&self, s: f64, t: f64) -> Result<PickFunction> {
        let inc = self.family.increment(s, t)?;
        match self.kind {
            ConvKind::Classical => Err(Error::InvalidArgument("classical hemigroups have no F-transform here".into())),
            ConvKind::Boolean => Ok(PickFunction::explicit_displacement("boolean hemigroup", move |z| {
                Ok(-inc.phi(z).0)
            })),
            ConvKind::Free => Ok(PickFunction::explicit_displacement("free hemigroup", move |z| {
                Ok(free_solve(&inc, z)? - z)
            })),
            ConvKind::Monotone => {
                let (s, t) = self.family.check_times(s, t)?;
                Ok(self.chain()?.pick(s, t))
            }
        }
    }
}

fn check_upper(z: C64) -> Result<()> {
    if z.im > 0.0 && z.is_finite() {
        Ok(())
    } else {
        Err(Error::OutOfHalfPlane(z.to_string()))
    }
}

/// Solves `w + φ(w) = z` for `w ∈ ℂ⁺`.
fn free_solve(inc: &Increment, z: C64) -> Result<C64> {
    check_upper(z)?;
    if inc.is_pure_drift() {
        return Ok(z - inc.drift);
    }
    let resid = |w: C64| {
        let (p, dp) = inc.phi(w);
        (w + p - z, 1.0 + dp, p)
    };
    let floor = |w: C64, p: C64| 8.0 * f64::EPSILON * (1.0 + w.norm() + z.norm() + p.norm());
    let mut w = z - inc.phi(z).0;
    let (mut r, mut dr, mut p) = resid(w);
    let mut best = (w, r.norm());
    for _ in 0..300 {
        if r.norm() <= floor(w, p) {
            return Ok(w);
        }
        let newton = w - r / dr;
        let mut next = z - p;
        if newton.im > 0.0 && newton.is_finite() {
            let (rn, _, _) = resid(newton);
            if rn.norm() < r.norm() {
                next = newton;
            }
        }
        let step = (next - w).norm();
        w = next;
        (r, dr, p) = resid(w);
        if r.norm() < best.1 {
            best = (w, r.norm());
        }
        if step <= 1e-15 * (1.0 + w.norm()) {
            break;
        }
    }
    if best.1 <= 1e3 * floor(best.0, inc.phi(best.0).0) {
        return Ok(best.0);
    }
    free_solve_roots(inc, z)
}

/// Root of the polynomial form of `w + φ(w) = z` in the upper half-plane.
fn free_solve_roots(inc: &Increment, z: C64) -> Result<C64> {
    let red = inc.to_reduced();
    let one = C64::new(1.0, 0.0);
    let mul_lin = |c: &[C64], x: f64| {
        let mut n = vec![C64::new(0.0, 0.0); c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            n[i + 1] += v;
            n[i] -= v * x;
        }
        n
    };
    let mut prod = vec![one];
    for &(x, _) in &red.atoms {
        prod = mul_lin(&prod, x);
    }
    // (w + m - z) Π (w - x_l)
    let mut p = vec![C64::new(0.0, 0.0); prod.len() + 1];
    for (i, &v) in prod.iter().enumerate() {
        p[i + 1] += v;
        p[i] += v * (red.drift - z);
    }
    for (j, &(_, k)) in red.atoms.iter().enumerate() {
        let mut q = vec![one];
        for (l, &(x, _)) in red.atoms.iter().enumerate() {
            if l != j {
                q = mul_lin(&q, x);
            }
        }
        for (i, v) in q.into_iter().enumerate() {
            p[i] += k * v;
        }
    }
    let mut w = complex_roots(&p)
        .into_iter()
        .filter(|r| r.im > 0.0 && r.is_finite())
        .max_by(|a, b| a.im.total_cmp(&b.im))
        .ok_or_else(|| Error::OutOfCone(format!("no solution in the upper half-plane for z = {z}")))?;
    for _ in 0..5 {
        let (ph, dph) = red.phi(w);
        let step = (w + ph - z) / (1.0 + dph);
        if !step.is_finite() || !(w - step).im.is_sign_positive() {
            break;
        }
        w -= step;
    }
    Ok(w)
}

/// `ψ(ξ, x) = (e^{iξx} - 1 - iξx)/x²`, continued by `-ξ²/2` at `x = 0`.
fn lk_integrand(xi: f64, x: f64) -> C64 {
    let u = xi * x;
    if u.abs() < 1e-2 {
        // (e^{iu} - 1 - iu)/u² as a series.
        let s = C64::new(-0.5 + u * u / 24.0 - u.powi(4) / 720.0, -u / 6.0 + u.powi(3) / 120.0);
        return xi * xi * s;
    }
    (C64::new(0.0, u).exp() - 1.0 - C64::new(0.0, u)) / (x * x)
}

fn classical_cf(inc: &Increment, xi: f64) -> C64 {
    let mut e = C64::new(0.0, inc.drift * xi);
    for &(x, k) in &inc.atoms {
        e += k * lk_integrand(xi, x);
    }
    e.exp()
}

/// Transform of `μ_{s,t}`: characteristic function at real `ξ` for the classical kind,
/// reciprocal Cauchy transform at `z ∈ ℂ⁺` otherwise.
pub fn ch_transform_eval(h: &CHHandle, s: f64, t: f64, arg: C64) -> Result<C64> {
    let inc = h.family.increment(s, t)?;
    match h.kind {
        ConvKind::Classical => {
            if arg.im != 0.0 || !arg.re.is_finite() {
                return Err(Error::InvalidArgument(format!("characteristic function needs real argument, got {arg}")));
            }
            Ok(classical_cf(&inc.to_reduced(), arg.re))
        }
        ConvKind::Boolean => {
            check_upper(arg)?;
            Ok(arg - inc.phi(arg).0)
        }
        ConvKind::Free => free_solve(&inc, arg),
        ConvKind::Monotone => {
            check_upper(arg)?;
            let (s, t) = h.family.check_times(s, t)?;
            h.chain()?.reverse_flow(s, t, arg)
        }
    }
}

/// `μ_{s,t}` on a grid of `n_grid` points.
pub fn ch_measure(h: &CHHandle, s: f64, t: f64, window: Option<(f64, f64)>, n_grid: usize) -> Result<Measure> {
    ch_measure_with(h, s, t, window, &StieltjesOptions::with_grid(n_grid))
}

/// `μ_{s,t}` with explicit inversion options.
///
/// Boolean measures of atomic families are recovered exactly from the rational
/// reciprocal Cauchy transform. Classical measures come from Fourier inversion
/// of the characteristic function, with a Gaussian mollifier of variance
/// `max(0, (2dx)² - σ²)` where `σ²` is the Gaussian part of `κ_{s,t}`.
pub fn ch_measure_with(
    h: &CHHandle,
    s: f64,
    t: f64,
    window: Option<(f64, f64)>,
    opts: &StieltjesOptions,
) -> Result<Measure> {
    let inc = h.family.increment(s, t)?;
    let red = inc.to_reduced();
    if red.is_pure_drift() {
        return Ok(Measure::dirac(red.drift));
    }
    match h.kind {
        ConvKind::Classical => classical_measure(&red, window, opts.n_grid),
        ConvKind::Boolean => boolean_measure(&red),
        ConvKind::Free | ConvKind::Monotone => {
            let f = h.pick(s, t)?;
            let g = |z: C64| -> Result<C64> { Ok(1.0 / f.eval(z)?) };
            match window {
                Some(w) => stieltjes_invert_with(&g, w, opts),
                None => invert_widening(&g, auto_window(&red, 4.0), opts),
            }
        }
    }
}

fn auto_window(red: &Increment, k_sd: f64) -> (f64, f64) {
    let sd = red.variance().sqrt();
    let (a, b) = red.hull();
    let lo = a.min(red.drift).min(red.drift + a) - k_sd * sd;
    let hi = b.max(red.drift).max(red.drift + b) + k_sd * sd;
    let pad = 0.02 * (hi - lo) + 1e-3;
    (lo - pad, hi + pad)
}

fn boolean_measure(red: &Increment) -> Result<Measure> {
    // Zeros of F(x) = x - m - Σ κ_j/(x - x_j), i.e. of the numerator polynomial.
    let xs: Vec<f64> = red.atoms.iter().map(|a| a.0).collect();
    let mut p = Poly::from_roots(&xs).mul(&Poly::linear_root(red.drift));
    for (j, &(_, k)) in red.atoms.iter().enumerate() {
        let others: Vec<f64> = xs.iter().enumerate().filter(|(l, _)| *l != j).map(|(_, &x)| x).collect();
        p = p.sub(&Poly::from_roots(&others).scale(k));
    }
    let phi = |x: f64| {
        let mut f = x - red.drift;
        let mut fp = 1.0;
        for &(a, k) in &red.atoms {
            let r = 1.0 / (x - a);
            f -= k * r;
            fp += k * r * r;
        }
        (f, fp)
    };
    finish_discrete(poles_with_residues(&p, phi))
}

fn classical_measure(red: &Increment, window: Option<(f64, f64)>, n_grid: usize) -> Result<Measure> {
    let n = (n_grid.max(16) + 1) & !1;
    let var = red.variance();
    let gauss: f64 = red.atoms.iter().filter(|a| a.0 == 0.0).map(|a| a.1).sum();
    let (mut lo, mut hi) = window.unwrap_or_else(|| auto_window(red, 8.0));
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!("empty window [{lo}, {hi}]")));
    }
    let mut best: Option<(f64, Measure)> = None;
    for _ in 0..8 {
        let dx = (hi - lo) / (n - 1) as f64;
        let h2 = ((2.0 * dx).powi(2) - gauss).max(0.0);
        let dxi = 2.0 * std::f64::consts::PI / (n as f64 * dx);
        let mut buf: Vec<C64> = (0..n)
            .map(|j| {
                let xi = (j as f64 - (n / 2) as f64) * dxi;
                classical_cf(red, xi) * (-0.5 * h2 * xi * xi).exp() * C64::new(0.0, -xi * lo).exp()
            })
            .collect();
        FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
        let scale = dxi / (2.0 * std::f64::consts::PI);
        let values: Vec<f64> = buf
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                (sign * scale * v.re).max(0.0)
            })
            .collect();
        let m = Measure::from_density(GridDensity::new(lo, dx, values))?;
        let mean_err = (m.mean() - red.drift).abs() / (1.0 + var.sqrt());
        let var_err = (m.variance() - var - h2).abs() / (var + h2);
        let err = mean_err.max(var_err).max((m.mass() - 1.0).abs());
        if best.as_ref().map_or(true, |b| err < b.0) {
            best = Some((err, m));
        }
        if err <= 1e-7 || window.is_some() {
            break;
        }
        let w = hi - lo;
        lo -= 0.5 * w;
        hi += 0.5 * w;
    }
    Ok(best.unwrap().1)
}

/// `ṁ_s` for `n = 1`, `M_{n-2}(κ̇_s)` for `n ≥ 2`.
pub fn moment_generator(f: &GeneratingFamily, s: f64, n: u32) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("moment order must be at least 1".into()));
    }
    let (mdot, k) = f.slopes(s)?;
    if n == 1 {
        return Ok(mdot);
    }
    Ok(k.iter().map(|&(x, w)| w * if n == 2 { 1.0 } else { x.powi(n as i32 - 2) }).sum())
}

/// Finite-difference generator of `M_n` at `s` from the measures of `h`.
///
/// With `D(d) = M_n(μ_{s-d/2, s+d/2})/d`, returns `2D(Δ/2) - D(Δ)`.
pub fn fd_moment_generator(h: &CHHandle, s: f64, n: u32, delta: f64, opts: &StieltjesOptions) -> Result<f64> {
    Ok(*fd_moment_generators(h, s, n, delta, opts)?.last().unwrap())
}

/// [`fd_moment_generator`] for every order `1..=n_max`, sharing the two measures.
pub fn fd_moment_generators(
    h: &CHHandle,
    s: f64,
    n_max: u32,
    delta: f64,
    opts: &StieltjesOptions,
) -> Result<Vec<f64>> {
    if n_max == 0 {
        return Err(Error::InvalidArgument("moment order must be at least 1".into()));
    }
    let f = &h.family;
    let (a, b) = (s - 0.5 * delta, s + 0.5 * delta);
    let (i, _) = f.locate(s);
    if !(a > f.grid[i] && b < f.grid[i + 1]) {
        return Err(Error::InvalidArgument(format!("[{a}, {b}] crosses a grid node")));
    }
    let (full, half) = rayon::join(
        || ch_measure_with(h, a, b, None, opts),
        || ch_measure_with(h, s - 0.25 * delta, s + 0.25 * delta, None, opts),
    );
    let (full, half) = (full?, half?);
    Ok((1..=n_max)
        .map(|n| 2.0 * moment(&half, n) / (0.5 * delta) - moment(&full, n) / delta)
        .collect())
}

/// Inversion options tuned for moment extraction.
pub fn moment_options(n_grid: usize) -> StieltjesOptions {
    StieltjesOptions { binning: Binning::Barycentric, ..StieltjesOptions::with_grid(n_grid) }
}

/// `H_{s,t}(w) = w + φ_{s,t}(w)` for the free hemigroup.
fn free_h(inc: &Increment, w: C64) -> C64 {
    w + inc.phi(w).0
}

/// `F_{m̃_{s,t}}(z)` for the monotone hemigroup subordinating the free one:
/// the solution `ζ` of `F_{f_{0,s}}(ζ) = F_{f_{0,t}}(z)`.
pub fn free_subordination_eval(f: &GeneratingFamily, s: f64, t: f64, z: C64) -> Result<C64> {
    check_upper(z)?;
    let (s, t) = f.check_times(s, t)?;
    if s == t {
        return Ok(z);
    }
    let w = free_solve(&f.increment(0.0, t)?, z)?;
    if s == 0.0 {
        return Ok(w);
    }
    let inc_s = f.increment(0.0, s)?;
    let mut zeta = free_h(&inc_s, w);
    let tol = 1e-11 * (1.0 + w.norm());
    for _ in 0..20 {
        let fz = free_solve(&inc_s, zeta)?;
        let r = fz - w;
        if r.norm() <= tol {
            return Ok(zeta);
        }
        // F'(ζ) = 1 / H'(F(ζ)).
        let step = r * (1.0 + inc_s.phi(fz).1);
        if !(zeta - step).im.is_sign_positive() || !step.is_finite() {
            break;
        }
        zeta -= step;
    }
    Err(Error::OutOfCone(format!("composition check failed at z = {z}")))
}

/// Smooth bump `exp(-1/(1 - u²))`, `u = (x - center)/half_width`, supported on `|u| < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: f64,
    pub half_width: f64,
}

impl Bump {
    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.half_width;
        if u.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - u * u)).exp()
        }
    }
}

/// Both sides of the subordination identity for `κ̃_t`, paired with test functions.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaCheck {
    /// `⟨φ, κ̃_t⟩` from the characteristic measures of the subordination chain.
    pub chain: Vec<f64>,
    /// `∫∫ ⟨φ, δ_x ▷ f_{0,s}⟩ κ̇_s(dx) ds`.
    pub integral: Vec<f64>,
    pub chain_mass: f64,
    pub integral_mass: f64,
    pub residual: f64,
}

fn pair(m: &Measure, phi: &Bump) -> f64 {
    let mut v: f64 = m.atoms.iter().map(|a| a.weight * phi.eval(a.location)).sum();
    if let Some(d) = &m.density {
        v += (0..d.len()).map(|k| d.weight(k) * d.values[k] * phi.eval(d.x(k))).sum::<f64>();
    }
    v
}

/// Default test functions covering the support of `κ̃_t`.
pub fn default_bumps(f: &GeneratingFamily, t: f64) -> Result<Vec<Bump>> {
    let red = f.reduced_increment(0.0, t)?;
    let sd = red.variance().sqrt();
    let (a, b) = red.hull();
    let lo = (a - 2.0 * sd - 0.5).floor();
    let hi = (b + 2.0 * sd + 0.5).ceil();
    let mut out = Vec::new();
    let mut c = lo;
    while c <= hi + 1e-12 {
        out.push(Bump { center: c, half_width: 1.0 });
        c += 0.5;
    }
    Ok(out)
}

/// Maximal discrepancy between the two sides of the subordination identity.
pub fn subordination_kappa_check(f: &GeneratingFamily, t: f64, test_fns: &[Bump]) -> Result<f64> {
    Ok(subordination_kappa_pairings(f, t, test_fns, 512)?.residual)
}

/// Pairings behind [`subordination_kappa_check`], with inversions on `n_grid` points.
pub fn subordination_kappa_pairings(f: &GeneratingFamily, t: f64, test_fns: &[Bump], n_grid: usize) -> Result<KappaCheck> {
    let (_, t) = f.check_times(0.0, t)?;
    let nb = test_fns.len();
    if t == 0.0 {
        return Ok(KappaCheck {
            chain: vec![0.0; nb],
            integral: vec![0.0; nb],
            chain_mass: 0.0,
            integral_mass: 0.0,
            residual: 0.0,
        });
    }
    let opts = StieltjesOptions::with_grid(n_grid);
    let fam = Arc::new(family_convert(f, FamilyForm::Reduced));

    // Characteristic measures of the chain on N subintervals, Richardson over N = 8, 16.
    let chain_sum = |n: usize| -> Result<(Vec<f64>, f64)> {
        let parts: Vec<(Vec<f64>, f64)> = (0..n)
            .into_par_iter()
            .map(|k| {
                let a = t * k as f64 / n as f64;
                let b = t * (k + 1) as f64 / n as f64;
                let inc_a = fam.increment(0.0, a)?;
                let inc_b = fam.increment(0.0, b)?;
                let g = PickFunction::explicit_displacement("subordination step", move |z| {
                    Ok(free_h(&inc_a, free_solve(&inc_b, z)?) - z)
                });
                let p = p2_analyze_with(&g, &opts, None)?;
                Ok((test_fns.iter().map(|phi| pair(&p.rho_f, phi)).collect(), p.r))
            })
            .collect::<Result<_>>()?;
        let mut v = vec![0.0; nb];
        let mut mass = 0.0;
        for (p, r) in parts {
            v.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            mass += r;
        }
        Ok((v, mass))
    };
    let (l8, m8) = chain_sum(8)?;
    let (l16, m16) = chain_sum(16)?;
    let chain: Vec<f64> = l8.iter().zip(&l16).map(|(a, b)| 2.0 * b - a).collect();
    let chain_mass = 2.0 * m16 - m8;

    // Quadrature over (x, s) of ⟨φ, δ_x ▷ f_{0,s}⟩.
    let mut nodes: Vec<(f64, f64, f64)> = Vec::new();
    for i in 0..fam.grid.len() - 1 {
        let (a, b) = (fam.grid[i], fam.grid[i + 1].min(t));
        if b <= a {
            break;
        }
        let (_, slopes) = fam.slopes(0.5 * (fam.grid[i] + fam.grid[i + 1]))?;
        for (s, w) in gauss_on(8, a, b) {
            for &(x, k) in &slopes {
                nodes.push((s, x, w * k));
            }
        }
    }
    let integral_mass: f64 = nodes.iter().map(|n| n.2).sum();
    let parts: Vec<Vec<f64>> = nodes
        .par_iter()
        .map(|&(s, x, w)| {
            let inc = fam.increment(0.0, s)?;
            let g = move |z: C64| -> Result<C64> { Ok(1.0 / (free_solve(&inc, z)? - x)) };
            let mu = crate::transforms::invert_auto(&g, &opts)?;
            Ok(test_fns.iter().map(|phi| w * pair(&mu, phi)).collect())
        })
        .collect::<Result<_>>()?;
    let mut integral = vec![0.0; nb];
    for p in parts {
        integral.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    let residual = chain
        .iter()
        .zip(&integral)
        .map(|(a, b)| (a - b).abs())
        .fold((chain_mass - integral_mass).abs(), f64::max);
    Ok(KappaCheck { chain, integral, chain_mass, integral_mass, residual })
}

/// `sup` over pairs `s < t` of `t_grid` of Lévy distance plus variance gap.
pub fn family_luw_distance(
    a: &GeneratingFamily,
    b: &GeneratingFamily,
    kind: ConvKind,
    t_grid: &[f64],
    n_grid: usize,
) -> Result<f64> {
    if (a.t_end() - b.t_end()).abs() > TIME_EPS * (1.0 + a.t_end()) {
        return Err(Error::InvalidFamily("families live on different time ranges".into()));
    }
    let ha = CHHandle::new(a.clone(), kind)?;
    let hb = CHHandle::new(b.clone(), kind)?;
    let mut pairs = Vec::new();
    for (i, &s) in t_grid.iter().enumerate() {
        for &t in &t_grid[i + 1..] {
            if t > s {
                pairs.push((s, t));
            } else if s > t {
                pairs.push((t, s));
            }
        }
    }
    let opts = StieltjesOptions::with_grid(n_grid);
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(s, t)| {
            let ma = ch_measure_with(&ha, s, t, None, &opts)?;
            let mb = ch_measure_with(&hb, s, t, None, &opts)?;
            let va = a.reduced_increment(s, t)?.variance();
            let vb = b.reduced_increment(s, t)?.variance();
            Ok(levy_distance(&ma, &mb)? + (va - vb).abs())
        })
        .collect::<Result<_>>()?;
    Ok(vals.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss_family() -> GeneratingFamily {
        GeneratingFamily::linear(1.0, 0.0, &[(0.0, 1.0)]).unwrap()
    }

    #[test]
    fn convert_examples() {
        let full = GeneratingFamily {
            grid: vec![0.0, 1.0],
            m: vec![0.0, 0.0],
            atoms: vec![FamilyAtom { x: 1.0, weights: vec![0.0, 1.0] }],
            form: FamilyForm::Full,
        };
        let red = family_convert(&full, FamilyForm::Reduced);
        assert_eq!(red.m, vec![0.0, 1.0]);
        assert_eq!(red.atoms[0].weights, vec![0.0, 2.0]);
        assert_eq!(family_convert(&red, FamilyForm::Full), full);
    }

    #[test]
    fn transforms_of_gauss_family() {
        let f = gauss_family();
        let c = CHHandle::new(f.clone(), ConvKind::Classical).unwrap();
        let v = ch_transform_eval(&c, 0.0, 1.0, C64::new(1.0, 0.0)).unwrap();
        assert!((v - C64::new((-0.5f64).exp(), 0.0)).norm() < 1e-15);
        let b = CHHandle::new(f.clone(), ConvKind::Boolean).unwrap();
        let v = ch_transform_eval(&b, 0.0, 1.0, C64::new(0.0, 1.0)).unwrap();
        assert!((v - C64::new(0.0, 2.0)).norm() < 1e-15);
        let fr = CHHandle::new(f, ConvKind::Free).unwrap();
        let v = ch_transform_eval(&fr, 0.0, 1.0, C64::new(0.0, 3.0)).unwrap();
        assert!((v - C64::new(0.0, (3.0 + 13f64.sqrt()) / 2.0)).norm() < 1e-14);
    }

    #[test]
    fn lk_series_matches_direct() {
        for &(xi, x) in &[(1.0, 1e-3), (2.0, 4.9e-3), (0.3, 0.02)] {
            let u: f64 = xi * x;
            let direct = (C64::new(0.0, u).exp() - 1.0 - C64::new(0.0, u)) / (x * x);
            let s = lk_integrand(xi, x);
            assert!((s - direct).norm() < 1e-8 * direct.norm(), "{s} {direct}");
        }
    }

    #[test]
    fn free_roots_fallback_agrees() {
        let inc = Increment { drift: 0.3, atoms: vec![(0.0, 1.0), (1.0, 0.5)], form: FamilyForm::Reduced };
        let z = C64::new(0.4, 0.2);
        let a = free_solve(&inc, z).unwrap();
        let b = free_solve_roots(&inc, z).unwrap();
        assert!((a - b).norm() < 1e-12, "{a} {b}");
    }

    #[test]
    fn slopes_at_nodes_are_ambiguous() {
        let f = gauss_family();
        assert!(matches!(moment_generator(&f, 0.0, 2), Err(Error::AmbiguousSlope(_))));
        assert_eq!(moment_generator(&f, 0.5, 2).unwrap(), 1.0);
        assert_eq!(moment_generator(&f, 0.5, 3).unwrap(), 0.0);
    }
}
