//! Chordal Loewner chains driven by piecewise-constant Cauchy measure fields.
//!
//! On each segment the field is `p(z,u) = -ṁ + λ ∫ ν(dx)/(x - z)` and the reverse
//! evolution `f_{s,t}` solves `∂_s f = -p(f, s)`, `f_{t,t} = id`. Integration runs in
//! the drift-free coordinates `w = f - m_u`.

use crate::error::{Error, Result};
use crate::measures::Measure;
use crate::quad::gauss_on;
use crate::transforms::{cauchy_raw, p2_scalars, stieltjes_invert_with, PickFunction, StieltjesOptions};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};

const TIME_EPS: f64 = 1e-12;
const MIN_IM: f64 = 1e-12;

/// One constant piece of the driving data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub rate: f64,
    pub drift: f64,
    pub kernel: Measure,
}

/// Piecewise-constant rate, kernel and drift on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingSpec {
    pub segments: Vec<Segment>,
}

impl DrivingSpec {
    /// Single segment on `[0, t_end]`.
    pub fn constant(t_end: f64, rate: f64, kernel: Measure, drift: f64) -> Self {
        DrivingSpec { segments: vec![Segment { t0: 0.0, t1: t_end, rate, drift, kernel }] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidSpec("no segments".into()));
        }
        if self.segments[0].t0 != 0.0 {
            return Err(Error::InvalidSpec("first segment must start at 0".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.t1 > s.t0) || !s.t1.is_finite() {
                return Err(Error::InvalidSpec(format!("segment {i} has empty time range")));
            }
            if !(s.rate >= 0.0) || !s.rate.is_finite() || !s.drift.is_finite() {
                return Err(Error::InvalidSpec(format!("segment {i} has invalid rate or drift")));
            }
            s.kernel.validate().map_err(|e| Error::InvalidSpec(format!("segment {i}: {e}")))?;
            if (s.kernel.mass() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidSpec(format!("segment {i}: kernel mass {}", s.kernel.mass())));
            }
            if i > 0 && (self.segments[i - 1].t1 - s.t0).abs() > TIME_EPS {
                return Err(Error::InvalidSpec(format!("gap or overlap before segment {i}")));
            }
        }
        Ok(())
    }

    pub fn t_end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.t1)
    }

    /// Same spec with every rate multiplied by `c`.
    pub fn with_rates_scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.segments {
            s.rate *= c;
        }
        out
    }
}

/// Solver handle for the reverse evolution family of a driving spec.
#[derive(Debug, Clone)]
pub struct LoewnerChain {
    pub spec: DrivingSpec,
    pub ode_tol: f64,
    r_nodes: Vec<f64>,
    m_nodes: Vec<f64>,
}

/// Part of one segment inside a requested time interval.
#[derive(Debug, Clone, Copy)]
struct Piece<'a> {
    a: f64,
    b: f64,
    seg: &'a Segment,
}

impl LoewnerChain {
    pub fn new(spec: DrivingSpec) -> Result<Self> {
        Self::with_tol(spec, 1e-10)
    }

    pub fn with_tol(spec: DrivingSpec, ode_tol: f64) -> Result<Self> {
        spec.validate()?;
        if !(ode_tol > 0.0) {
            return Err(Error::InvalidArgument("ode_tol must be positive".into()));
        }
        let mut r_nodes = vec![0.0];
        let mut m_nodes = vec![0.0];
        for s in &spec.segments {
            let dt = s.t1 - s.t0;
            r_nodes.push(r_nodes.last().unwrap() + s.rate * dt);
            m_nodes.push(m_nodes.last().unwrap() + s.drift * dt);
        }
        Ok(LoewnerChain { spec, ode_tol, r_nodes, m_nodes })
    }

    pub fn t_end(&self) -> f64 {
        self.spec.t_end()
    }

    fn seg_index(&self, t: f64) -> usize {
        let segs = &self.spec.segments;
        segs.partition_point(|s| s.t1 <= t).min(segs.len() - 1)
    }

    /// `∫_0^t λ`.
    pub fn r(&self, t: f64) -> f64 {
        let i = self.seg_index(t);
        let s = &self.spec.segments[i];
        self.r_nodes[i] + s.rate * (t.clamp(s.t0, s.t1) - s.t0)
    }

    /// `∫_0^t ṁ`.
    pub fn m(&self, t: f64) -> f64 {
        let i = self.seg_index(t);
        let s = &self.spec.segments[i];
        self.m_nodes[i] + s.drift * (t.clamp(s.t0, s.t1) - s.t0)
    }

    fn check_times(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        let te = self.t_end();
        if !(s >= -TIME_EPS && s <= t + TIME_EPS && t <= te + TIME_EPS) {
            return Err(Error::InvalidArgument(format!("need 0 <= s <= t <= {te}, got s={s}, t={t}")));
        }
        let t = t.clamp(0.0, te);
        Ok((s.clamp(0.0, t), t))
    }

    /// Segment pieces covering `[s, t]`, latest first.
    fn pieces(&self, s: f64, t: f64) -> Vec<Piece<'_>> {
        let mut v: Vec<Piece<'_>> = self
            .spec
            .segments
            .iter()
            .filter_map(|seg| {
                let a = seg.t0.max(s);
                let b = seg.t1.min(t);
                (b > a).then_some(Piece { a, b, seg })
            })
            .collect();
        v.reverse();
        v
    }

    /// Wraps `f_{s,t}` as a Pick function.
    pub fn pick(self: &Arc<Self>, s: f64, t: f64) -> PickFunction {
        PickFunction::LoewnerBacked { chain: Arc::clone(self), s, t }
    }

    /// `f_{s,t}(z)`.
    pub fn reverse_flow(&self, s: f64, t: f64, z: C64) -> Result<C64> {
        Ok(z + self.displacement(s, t, z)?)
    }

    /// `f_{s,t}(z) - z`.
    pub fn displacement(&self, s: f64, t: f64, z: C64) -> Result<C64> {
        self.solve(s, t, z, None)
    }

    /// Solution path `(u, f_{u,t}(z))` at accepted steps, from `u = t` down to `u = s`.
    pub fn trace(&self, s: f64, t: f64, z: C64) -> Result<Vec<(f64, C64)>> {
        let mut out = Vec::new();
        self.solve(s, t, z, Some(&mut out))?;
        Ok(out)
    }

    /// CSV rows `u,re,im` of [`LoewnerChain::trace`].
    pub fn trace_csv(&self, s: f64, t: f64, z: C64) -> Result<String> {
        let mut out = String::from("u,re,im\n");
        for (u, w) in self.trace(s, t, z)? {
            out.push_str(&format!("{u:.16e},{:.16e},{:.16e}\n", w.re, w.im));
        }
        Ok(out)
    }

    fn solve(&self, s: f64, t: f64, z: C64, mut trace: Option<&mut Vec<(f64, C64)>>) -> Result<C64> {
        if !(z.im >= MIN_IM) || !z.re.is_finite() || !z.im.is_finite() {
            return Err(Error::OutOfHalfPlane(format!("{z} (solver requires Im z >= {MIN_IM:e})")));
        }
        let (s, t) = self.check_times(s, t)?;
        let mt = self.m(t);
        let base = z - mt;
        let mut d = C64::new(0.0, 0.0);
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((t, z));
        }
        for p in self.pieces(s, t) {
            d = self.integrate_piece(p, base, d, trace.as_deref_mut())?;
        }
        Ok(d - (mt - self.m(s)))
    }

    /// Advances the displacement `D` (with `w = base + D`) from `u = b` down to `u = a`.
    fn integrate_piece(
        &self,
        p: Piece<'_>,
        base: C64,
        d0: C64,
        mut trace: Option<&mut Vec<(f64, C64)>>,
    ) -> Result<C64> {
        let seg = p.seg;
        if seg.rate == 0.0 {
            if let Some(tr) = trace {
                tr.push((p.a, base + d0 + self.m(p.a)));
            }
            return Ok(d0);
        }
        let span = p.b - p.a;
        let m_b = self.m(p.b);
        // τ = b - u; m_u = m_b - ṁ τ.
        let rhs = |tau: f64, d: C64| -> C64 {
            let w = base + d + m_b - seg.drift * tau;
            -seg.rate * cauchy_raw(&seg.kernel, w)
        };
        let tol = self.ode_tol;
        let mut tau = 0.0;
        let mut d = d0;
        let mut k1 = rhs(0.0, d);
        let w0 = base + d + m_b;
        let mut h = if k1.norm() > 0.0 { (0.1 * w0.im / k1.norm()).min(span) } else { span };
        while tau < span {
            let w = base + d + m_b - seg.drift * tau;
            let local = w.norm() / k1.norm().max(1e-300);
            if h < 1e-12 * local.min(span) || tau + h == tau {
                return Err(Error::StepUnderflow(p.b - tau));
            }
            let last = tau + h >= span * (1.0 - 1e-14);
            let hh = if last { span - tau } else { h };
            let (d_new, k_last, err) = dopri_step(&rhs, tau, d, k1, hh);
            let scale = tol * d.norm().max(d_new.norm());
            let ratio = if err == 0.0 { 0.0 } else { err / scale.max(1e-300) };
            if ratio <= 1.0 && d_new.is_finite() {
                tau = if last { span } else { tau + hh };
                d = d_new;
                k1 = k_last;
                if let Some(tr) = trace.as_deref_mut() {
                    let u = p.b - tau;
                    tr.push((u, base + d + self.m(u)));
                }
                let fac = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
                h = hh * fac;
            } else {
                let fac = if ratio.is_finite() { (0.9 * ratio.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
                h = hh * fac;
            }
        }
        Ok(d)
    }

    /// Right side of the integral equation, with `f_{r,t}(z)` supplied by `path`
    /// and the field taken from `self`.
    pub fn lie_rhs(&self, s: f64, t: f64, z: C64, path: &dyn Fn(f64) -> Result<C64>) -> Result<C64> {
        let (s, t) = self.check_times(s, t)?;
        let mut acc = z - (self.m(t) - self.m(s));
        for p in self.pieces(s, t) {
            if p.seg.rate == 0.0 {
                continue;
            }
            for (r, w) in gauss_on(20, p.a, p.b) {
                acc += w * -p.seg.rate * cauchy_raw(&p.seg.kernel, path(r)?);
            }
        }
        Ok(acc)
    }

    /// `|f_{s,t}(z) - RHS|` for the integral equation.
    pub fn lie_residual(&self, s: f64, t: f64, z: C64) -> Result<f64> {
        lie_residual_between(self, self, s, t, z)
    }

    /// Largest `|x - m_u|` over kernels active in `[s, t]`.
    fn shifted_radius(&self, s: f64, t: f64) -> Result<f64> {
        let mut r: f64 = 0.0;
        for p in self.pieces(s, t) {
            if p.seg.rate == 0.0 {
                continue;
            }
            let (lo, hi) = p
                .seg
                .kernel
                .support_hull()
                .ok_or_else(|| Error::InvalidSpec("empty kernel".into()))?;
            for m in [self.m(p.a), self.m(p.b)] {
                r = r.max((lo - m).abs()).max((hi - m).abs());
            }
        }
        Ok(r)
    }

    /// `f_{s,t}(z)` by Picard iteration, valid also for real `z` far from the support.
    ///
    /// The domain is `|z - m_t| ≥ R + 2√Λ` with `R` the support radius of the
    /// drift-shifted kernels and `Λ = ∫_s^t λ`.
    pub fn picard_extend(&self, s: f64, t: f64, z: C64) -> Result<C64> {
        let (s, t) = self.check_times(s, t)?;
        if z.im < 0.0 {
            return Err(Error::OutsideContinuationDomain(format!("{z} lies below the real axis")));
        }
        let mt = self.m(t);
        let zeta = z - mt;
        let big_r = self.shifted_radius(s, t)?;
        let lam = self.r(t) - self.r(s);
        let bound = big_r + 2.0 * lam.sqrt();
        if zeta.norm() < bound * (1.0 - 1e-14) || (bound == 0.0 && zeta.norm() == 0.0) {
            return Err(Error::OutsideContinuationDomain(format!(
                "|z - m_t| = {} < {}",
                zeta.norm(),
                bound
            )));
        }
        let mut h = zeta;
        for p in self.pieces(s, t) {
            h = if p.seg.rate == 0.0 { h } else { self.picard_piece(p, h, 0)? };
        }
        let out = h + self.m(s);
        Ok(if z.im == 0.0 { C64::new(out.re, 0.0) } else { out })
    }

    /// Picard iteration on one piece, from `h(b) = h_top` down to `u = a`.
    fn picard_piece(&self, p: Piece<'_>, h_top: C64, depth: usize) -> Result<C64> {
        let cheb = cheb_lobatto();
        let n = cheb.nodes.len();
        let half = 0.5 * (p.b - p.a);
        let u_of = |x: f64| p.a + half * (x + 1.0);
        let q = |u: f64, h: C64| -> C64 {
            // λ ∫ ν(dx)/(x - m_u - h)
            -p.seg.rate * cauchy_raw(&p.seg.kernel, h + self.m(u))
        };
        let mut hv = vec![h_top; n];
        let mut converged = false;
        for _ in 0..200 {
            let qv: Vec<C64> = (0..n).map(|j| q(u_of(cheb.nodes[j]), hv[j])).collect();
            let mut delta: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for j in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..n {
                    acc += cheb.upper[j][k] * qv[k];
                }
                let new = h_top + half * acc;
                delta = delta.max((new - hv[j]).norm());
                scale = scale.max(new.norm());
                hv[j] = new;
            }
            if !delta.is_finite() {
                return Err(Error::OutsideContinuationDomain("Picard iteration diverged".into()));
            }
            if delta <= 1e-12 * (1.0 + scale) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::OutsideContinuationDomain("Picard iteration did not converge".into()));
        }
        let tail = cheb_tail(&hv);
        if tail > 1e-14 * (1.0 + hv[0].norm()) && depth < 24 {
            let mid = 0.5 * (p.a + p.b);
            let upper = self.picard_piece(Piece { a: mid, b: p.b, seg: p.seg }, h_top, depth + 1)?;
            return self.picard_piece(Piece { a: p.a, b: mid, seg: p.seg }, upper, depth + 1);
        }
        // Node n-1 is x = -1, i.e. u = a.
        Ok(hv[n - 1])
    }
}

/// Residual of the integral equation with path and left side from `path_chain`
/// and the field from `field_chain`.
pub fn lie_residual_between(
    field_chain: &LoewnerChain,
    path_chain: &LoewnerChain,
    s: f64,
    t: f64,
    z: C64,
) -> Result<f64> {
    let (s, t) = field_chain.check_times(s, t)?;
    if s == t {
        return Ok(0.0);
    }
    let lhs = path_chain.reverse_flow(s, t, z)?;
    let path = |r: f64| path_chain.reverse_flow(r, t, z);
    let rhs = field_chain.lie_rhs(s, t, z, &path)?;
    Ok((lhs - rhs).norm())
}

/// `(m, r, measure)` of `f_{0,t}`, checked against the driving data.
pub fn chain_analysis(
    c: &Arc<LoewnerChain>,
    t: f64,
    window: Option<(f64, f64)>,
    n_grid: usize,
) -> Result<(f64, f64, Measure)> {
    let (_, t) = c.check_times(0.0, t)?;
    let f = c.pick(0.0, t);
    let (m, r) = p2_scalars(&f)?;
    let r_exact = c.r(t);
    let m_exact = c.m(t);
    if (r - r_exact).abs() > 1e-6f64.max(1e-4 * r_exact) || (m - m_exact).abs() > 1e-6 {
        return Err(Error::SolverInconsistent(format!(
            "residue {r} vs {r_exact}, mean {m} vs {m_exact}"
        )));
    }
    let g = |z: C64| -> Result<C64> { Ok(1.0 / f.eval(z)?) };
    let opts = StieltjesOptions::with_grid(n_grid);
    let measure = match window {
        Some(w) => stieltjes_invert_with(&g, w, &opts)?,
        None => {
            let sd = r_exact.sqrt();
            let mut half = 3.0 * sd + 1e-3 * (1.0 + m_exact.abs());
            let hull = c.shifted_radius(0.0, t)?;
            half = half.max(hull + 2.0 * sd + 1e-3);
            loop {
                match stieltjes_invert_with(&g, (m_exact - half, m_exact + half), &opts) {
                    Err(Error::WindowTooSmall { .. }) if half < 1e6 => half *= 2.0,
                    other => break other?,
                }
            }
        }
    };
    Ok((m, r, measure))
}

struct ChebLobatto {
    /// `x_j = cos(π j / N)`.
    nodes: Vec<f64>,
    /// `upper[j][k] = ∫_{x_j}^{1} ℓ_k(x) dx`.
    upper: Vec<Vec<f64>>,
}

const CHEB_N: usize = 32;

fn cheb_lobatto() -> &'static ChebLobatto {
    static CELL: OnceLock<ChebLobatto> = OnceLock::new();
    CELL.get_or_init(|| {
        let n = CHEB_N;
        let nodes: Vec<f64> = (0..=n).map(|j| (std::f64::consts::PI * j as f64 / n as f64).cos()).collect();
        let bw: Vec<f64> = (0..=n)
            .map(|j| {
                let s = if j % 2 == 0 { 1.0 } else { -1.0 };
                if j == 0 || j == n {
                    0.5 * s
                } else {
                    s
                }
            })
            .collect();
        let lagrange = |x: f64, k: usize| -> f64 {
            let mut den = 0.0;
            let mut num = 0.0;
            for j in 0..=n {
                let dxj = x - nodes[j];
                if dxj == 0.0 {
                    return if j == k { 1.0 } else { 0.0 };
                }
                let t = bw[j] / dxj;
                den += t;
                if j == k {
                    num = t;
                }
            }
            num / den
        };
        let upper = nodes
            .iter()
            .map(|&xj| {
                (0..=n)
                    .map(|k| {
                        if xj >= 1.0 {
                            0.0
                        } else {
                            gauss_on(40, xj, 1.0).map(|(x, w)| w * lagrange(x, k)).sum()
                        }
                    })
                    .collect()
            })
            .collect();
        ChebLobatto { nodes, upper }
    })
}

/// Magnitude of the two highest Chebyshev coefficients of node values.
fn cheb_tail(v: &[C64]) -> f64 {
    let n = v.len() - 1;
    let mut tail: f64 = 0.0;
    for k in [n - 1, n] {
        let mut c = C64::new(0.0, 0.0);
        for (j, &vj) in v.iter().enumerate() {
            let w = if j == 0 || j == n { 0.5 } else { 1.0 };
            c += w * vj * (std::f64::consts::PI * (j * k) as f64 / n as f64).cos();
        }
        let c = c * (2.0 / n as f64) * if k == n { 0.5 } else { 1.0 };
        tail = tail.max(c.norm());
    }
    tail
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// One step; returns the new state, the derivative there, and the error norm.
fn dopri_step(f: &impl Fn(f64, C64) -> C64, t: f64, y: C64, k1: C64, h: f64) -> (C64, C64, f64) {
    let k2 = f(t + h / 5.0, y + h * A21 * k1);
    let k3 = f(t + 3.0 * h / 10.0, y + h * (A31 * k1 + A32 * k2));
    let k4 = f(t + 4.0 * h / 5.0, y + h * (A41 * k1 + A42 * k2 + A43 * k3));
    let k5 = f(t + 8.0 * h / 9.0, y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4));
    let k6 = f(t + h, y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5));
    let y5 = y + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6);
    let k7 = f(t + h, y5);
    let err = h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7);
    (y5, k7, err.norm())
}
