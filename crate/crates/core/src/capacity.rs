//! Half-plane capacity of hulls, transfinite diameter of point clouds and
//! the disk-cover area bounds.

use crate::error::{Error, Result};
use crate::quad::pairwise_sum;
use crate::transforms::{p2_scalars, PickFunction};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// Inside test for sampled hulls.
pub type InsideFn = Arc<dyn Fn(C64) -> bool + Send + Sync>;

/// Hull given by sample points every `spacing` or closer, with an optional inside test.
#[derive(Clone)]
pub struct SampledHull {
    pub points: Vec<C64>,
    pub spacing: f64,
    pub inside: Option<InsideFn>,
}

impl fmt::Debug for SampledHull {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SampledHull")
            .field("points", &self.points.len())
            .field("spacing", &self.spacing)
            .field("inside", &self.inside.is_some())
            .finish()
    }
}

/// A bounded hull in the upper half-plane.
#[derive(Debug, Clone)]
pub enum HullSpec {
    HalfDisk { radius: f64 },
    VerticalSlit { foot: f64, length: f64 },
    /// Hull whose complement is the image of `f`.
    MappedBy(PickFunction),
    Sampled(SampledHull),
}

impl HullSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            HullSpec::HalfDisk { radius } if !(*radius >= 0.0 && radius.is_finite()) => {
                Err(Error::InvalidArgument(format!("radius {radius}")))
            }
            HullSpec::VerticalSlit { foot, length } if !(*length >= 0.0 && length.is_finite() && foot.is_finite()) => {
                Err(Error::InvalidArgument(format!("slit at {foot} of length {length}")))
            }
            HullSpec::Sampled(s) => {
                if s.points.iter().any(|p| !(p.im > 0.0) || !p.re.is_finite() || !p.im.is_finite()) {
                    return Err(Error::InvalidArgument("sampled hull points must lie in the upper half-plane".into()));
                }
                if !(s.spacing >= 0.0) {
                    return Err(Error::InvalidArgument(format!("spacing {}", s.spacing)));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            HullSpec::HalfDisk { radius } => *radius == 0.0,
            HullSpec::VerticalSlit { length, .. } => *length == 0.0,
            HullSpec::MappedBy(_) => false,
            HullSpec::Sampled(s) => s.points.is_empty(),
        }
    }

    /// `r·E`.
    pub fn scaled(&self, r: f64) -> Result<HullSpec> {
        Ok(match self {
            HullSpec::HalfDisk { radius } => HullSpec::HalfDisk { radius: r * radius },
            HullSpec::VerticalSlit { foot, length } => HullSpec::VerticalSlit { foot: r * foot, length: r * length },
            HullSpec::Sampled(s) => {
                let inside = s.inside.clone().map(|f| -> InsideFn { Arc::new(move |z: C64| f(z / r)) });
                HullSpec::Sampled(SampledHull {
                    points: s.points.iter().map(|p| p * r).collect(),
                    spacing: s.spacing * r,
                    inside,
                })
            }
            HullSpec::MappedBy(_) => return Err(Error::InvalidArgument("cannot rescale a mapped hull".into())),
        })
    }

    fn geometric(&self) -> Result<()> {
        if let HullSpec::MappedBy(_) = self {
            return Err(Error::InvalidArgument("a mapped hull has no explicit geometry".into()));
        }
        Ok(())
    }

    /// Largest imaginary part on the hull.
    pub fn sup_im(&self) -> Result<f64> {
        self.geometric()?;
        Ok(match self {
            HullSpec::HalfDisk { radius } => *radius,
            HullSpec::VerticalSlit { length, .. } => *length,
            HullSpec::Sampled(s) => s.points.iter().map(|p| p.im).fold(0.0, f64::max) + s.spacing,
            HullSpec::MappedBy(_) => unreachable!(),
        })
    }

    /// Points of the hull at most `dx` apart.
    pub fn sample_points(&self, dx: f64) -> Result<Vec<C64>> {
        self.geometric()?;
        Ok(match self {
            HullSpec::HalfDisk { radius } => {
                let mut v = Vec::new();
                let n = (radius / dx).ceil() as i64;
                for i in -n..=n {
                    for j in 1..=n {
                        let z = C64::new(i as f64 * dx, j as f64 * dx);
                        if z.norm() <= *radius {
                            v.push(z);
                        }
                    }
                }
                // Boundary arc.
                let m = ((PI * radius / dx).ceil() as usize).max(1);
                v.extend((1..m).map(|k| C64::from_polar(*radius, PI * k as f64 / m as f64)));
                v
            }
            HullSpec::VerticalSlit { foot, length } => {
                let m = ((length / dx).ceil() as usize).max(1);
                (1..=m).map(|k| C64::new(*foot, length * k as f64 / m as f64)).collect()
            }
            HullSpec::Sampled(s) => s.points.clone(),
            HullSpec::MappedBy(_) => unreachable!(),
        })
    }
}

/// Distance from `z` to a sampled hull, using the bounding box far away and a
/// bucket grid nearby.
struct SampledDistance<'a> {
    hull: &'a SampledHull,
    lo: C64,
    hi: C64,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<C64>>,
}

impl<'a> SampledDistance<'a> {
    fn new(hull: &'a SampledHull) -> Self {
        let (mut lo, mut hi) = (C64::new(f64::INFINITY, f64::INFINITY), C64::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in &hull.points {
            lo = C64::new(lo.re.min(p.re), lo.im.min(p.im));
            hi = C64::new(hi.re.max(p.re), hi.im.max(p.im));
        }
        let ext = (hi.re - lo.re).max(hi.im - lo.im).max(1e-12);
        let cell = (ext / 64.0).max(hull.spacing).max(ext / 1024.0);
        let nx = ((hi.re - lo.re) / cell) as usize + 1;
        let ny = ((hi.im - lo.im) / cell) as usize + 1;
        let mut buckets = vec![Vec::new(); nx * ny];
        for p in &hull.points {
            let i = (((p.re - lo.re) / cell) as usize).min(nx - 1);
            let j = (((p.im - lo.im) / cell) as usize).min(ny - 1);
            buckets[j * nx + i].push(*p);
        }
        SampledDistance { hull, lo, hi, cell, nx, ny, buckets }
    }

    fn nearest(&self, z: C64) -> f64 {
        let ci = ((z.re - self.lo.re) / self.cell).floor() as i64;
        let cj = ((z.im - self.lo.im) / self.cell).floor() as i64;
        let mut best = f64::INFINITY;
        let span = self.nx.max(self.ny) as i64;
        for ring in 0..=span + ci.abs().max(cj.abs()) {
            // Every point outside the searched rings is at least this far away.
            if best <= (ring as f64 - 1.0).max(0.0) * self.cell {
                break;
            }
            for j in cj - ring..=cj + ring {
                for i in ci - ring..=ci + ring {
                    if (j - cj).abs() != ring && (i - ci).abs() != ring {
                        continue;
                    }
                    if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
                        continue;
                    }
                    for p in &self.buckets[j as usize * self.nx + i as usize] {
                        best = best.min((p - z).norm());
                    }
                }
            }
        }
        best
    }

    fn lower_bound(&self, z: C64) -> f64 {
        if self.hull.inside.as_ref().map_or(false, |f| f(z)) {
            return 0.0;
        }
        let dx = (self.lo.re - z.re).max(z.re - self.hi.re).max(0.0);
        let dy = (self.lo.im - z.im).max(z.im - self.hi.im).max(0.0);
        let boxd = dx.hypot(dy);
        if boxd > 2.0 * self.cell {
            return boxd - self.hull.spacing;
        }
        (self.nearest(z) - self.hull.spacing).max(0.0)
    }
}

/// `hcap(E)`, the `1/z` coefficient of the mapping-out function.
pub fn hcap_exact(h: &HullSpec) -> Result<f64> {
    h.validate()?;
    match h {
        HullSpec::HalfDisk { radius } => Ok(radius * radius),
        HullSpec::VerticalSlit { length, .. } => Ok(0.5 * length * length),
        HullSpec::MappedBy(f) => Ok(p2_scalars(f)?.1),
        HullSpec::Sampled(_) => Err(Error::NoExactFormula),
    }
}

/// Parameters of [`hcap_mc`].
#[derive(Debug, Clone, PartialEq)]
pub struct McParams {
    /// Stopping shell and hull inflation `ε`.
    pub step: f64,
    pub n_walks: usize,
    /// Starting line `Im z = b`; defaults to `1.25·sup Im E`.
    pub strip_height: Option<f64>,
    pub seed: u64,
    /// Starting points satisfy `|x| ≤ truncation·b`.
    pub truncation: f64,
    pub max_steps: usize,
}

impl McParams {
    pub fn new(step: f64, n_walks: usize, seed: u64) -> Self {
        McParams { step, n_walks, strip_height: None, seed, truncation: 8.0, max_steps: 100_000 }
    }
}

/// Estimate and standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Monte Carlo half-plane capacity by Brownian exit from the strip line `Im z = b`.
///
/// Paths are simulated by walk on spheres and stopped within `step` of the
/// boundary. The starting abscissa is `x = b·tan θ` with `θ` stratified over
/// `|x| ≤ truncation·b`; each walk contributes `b·sec²θ·Im Z_τ`, which divides
/// the truncated integral by the Poisson mass of the truncation window.
pub fn hcap_mc(h: &HullSpec, p: &McParams) -> Result<McEstimate> {
    h.validate()?;
    h.geometric()?;
    if !(p.step > 0.0) || p.n_walks < 2 || !(p.truncation > 0.0) {
        return Err(Error::InvalidArgument("need step > 0, n_walks >= 2, truncation > 0".into()));
    }
    if h.is_empty() {
        return Ok(McEstimate { estimate: 0.0, stderr: 0.0 });
    }
    let sup = h.sup_im()?;
    let b = p.strip_height.unwrap_or(1.25 * sup);
    if !(b > sup) {
        return Err(Error::InvalidArgument(format!("strip height {b} must exceed sup Im = {sup}")));
    }
    let sampled = match h {
        HullSpec::Sampled(s) => Some(SampledDistance::new(s)),
        _ => None,
    };
    let eps = p.step;
    let dist_hull = |z: C64| -> f64 {
        match h {
            HullSpec::HalfDisk { radius } => (z.norm() - radius).max(0.0),
            HullSpec::VerticalSlit { foot, length } => {
                let dy = (z.im - length).max(0.0);
                (z.re - foot).hypot(dy)
            }
            HullSpec::Sampled(_) => sampled.as_ref().unwrap().lower_bound(z),
            HullSpec::MappedBy(_) => unreachable!(),
        }
    };
    let theta_max = p.truncation.atan();
    let n = p.n_walks;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            rng.set_stream(i as u64);
            let theta = -theta_max + 2.0 * theta_max * (i as f64 + rng.gen::<f64>()) / n as f64;
            let weight = b / theta.cos().powi(2);
            let mut z = C64::new(b * theta.tan(), b);
            for _ in 0..p.max_steps {
                let dh = dist_hull(z);
                let r = z.im.min(dh);
                if r < eps {
                    return Ok(if dh < z.im { weight * z.im } else { 0.0 });
                }
                let phi = 2.0 * PI * rng.gen::<f64>();
                z += C64::from_polar(r, phi);
            }
            Err(Error::WalkTimeout)
        })
        .collect::<Result<_>>()?;
    let mean = pairwise_sum(&values) / n as f64;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    Ok(McEstimate { estimate: mean, stderr: (var / n as f64).sqrt() })
}

/// Fekete-type selection and the resulting diameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TfdResult {
    pub d_n: f64,
    pub d_inf: f64,
    /// `(k, d_k)` for `k = 2..=n` after the nonincreasing correction.
    pub sequence: Vec<(usize, f64)>,
    /// The same values before the correction.
    pub raw: Vec<(usize, f64)>,
}

impl TfdResult {
    /// CSV rows `n,d_n`.
    pub fn csv(&self) -> String {
        let mut s = String::from("n,d_n\n");
        for (k, d) in &self.sequence {
            s.push_str(&format!("{k},{d:.16e}\n"));
        }
        s
    }
}

/// Indices of `n` points of `pts` maximizing the product of pairwise distances
/// over single exchanges, and the resulting `d_n`.
pub fn fekete_points(pts: &[C64], n: usize) -> Result<(Vec<usize>, f64)> {
    let big = pts.len();
    let distinct = {
        let mut v: Vec<(f64, f64)> = pts.iter().map(|p| (p.re, p.im)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        v.dedup();
        v.len()
    };
    if n < 2 || distinct < n {
        return Err(Error::TooFewPoints { need: n.max(2), got: distinct });
    }
    let lg = |a: usize, b: usize| (pts[a] - pts[b]).norm().ln();
    // Farthest pair.
    let (mut i0, mut j0, mut best) = (0, 1, f64::NEG_INFINITY);
    for a in 0..big {
        for b in a + 1..big {
            let d = (pts[a] - pts[b]).norm_sqr();
            if d > best {
                (i0, j0, best) = (a, b, d);
            }
        }
    }
    let mut sel = vec![i0, j0];
    let mut chosen = vec![false; big];
    chosen[i0] = true;
    chosen[j0] = true;
    // s[c] = Σ_{j ∈ sel} log|p_c - p_j|
    let mut s: Vec<f64> = (0..big).map(|c| lg(c, i0) + lg(c, j0)).collect();
    while sel.len() < n {
        let c = (0..big)
            .filter(|&c| !chosen[c])
            .max_by(|&a, &b| s[a].total_cmp(&s[b]))
            .unwrap();
        sel.push(c);
        chosen[c] = true;
        for (k, v) in s.iter_mut().enumerate() {
            *v += lg(k, c);
        }
    }
    loop {
        let mut improved = false;
        for k in 0..n {
            let cur = sel[k];
            let own = |c: usize| s[c] - lg(c, cur);
            let base: f64 = sel.iter().filter(|&&j| j != cur).map(|&j| lg(cur, j)).sum();
            let cand = (0..big)
                .filter(|&c| !chosen[c])
                .max_by(|&a, &b| own(a).total_cmp(&own(b)));
            if let Some(c) = cand {
                if own(c) > base + 1e-13 * (1.0 + base.abs()) {
                    chosen[cur] = false;
                    chosen[c] = true;
                    sel[k] = c;
                    for (q, v) in s.iter_mut().enumerate() {
                        *v = sel.iter().map(|&j| lg(q, j)).sum();
                    }
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let mut terms = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            terms.push(lg(sel[a], sel[b]));
        }
    }
    let d = (2.0 * pairwise_sum(&terms) / (n * (n - 1)) as f64).exp();
    Ok((sel, d))
}

/// `d_n` of the point cloud and an estimate of its limit.
///
/// `d_k` for `k = 2..=n` is computed by [`fekete_points`]; since every value is a
/// lower bound of a nonincreasing sequence, each `d_k` is raised to `max_{j ≥ k} d_j`.
/// The limit comes from a least-squares fit of
/// `log d_k = c₀ + c₁ log k/(k-1) + c₂/(k-1)` over `k ≥ 8` (all `k` for small `n`).
pub fn transfinite_diameter(points: &[C64], n: usize) -> Result<TfdResult> {
    if n < 2 {
        return Err(Error::InvalidArgument("n must be at least 2".into()));
    }
    let raw: Vec<(usize, f64)> = (2..=n)
        .into_par_iter()
        .map(|k| Ok((k, fekete_points(points, k)?.1)))
        .collect::<Result<_>>()?;
    let mut sequence = raw.clone();
    for i in (0..sequence.len() - 1).rev() {
        sequence[i].1 = sequence[i].1.max(sequence[i + 1].1);
    }
    let d_n = sequence.last().unwrap().1;
    let lo = if n >= 12 { 8 } else { 2 };
    let fit: Vec<&(usize, f64)> = sequence.iter().filter(|(k, _)| *k >= lo).collect();
    let d_inf = if fit.len() >= 4 {
        let a = DMatrix::from_fn(fit.len(), 3, |r, c| {
            let k = fit[r].0 as f64;
            match c {
                0 => 1.0,
                1 => k.ln() / (k - 1.0),
                _ => 1.0 / (k - 1.0),
            }
        });
        let y = DVector::from_iterator(fit.len(), fit.iter().map(|(_, d)| d.ln()));
        let sol = a.svd(true, true).solve(&y, 1e-14).map_err(|e| Error::NumericalDomain(e.into()))?;
        sol[0].exp()
    } else {
        d_n
    };
    Ok(TfdResult { d_n, d_inf, sequence, raw })
}

/// Raster of the union of the disks `D(x+iy, y)` over the hull.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskCover {
    pub x0: f64,
    pub dx: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major, row 0 at `Im = 0`.
    pub mask: Vec<bool>,
}

impl DiskCover {
    pub fn area(&self) -> f64 {
        self.mask.iter().filter(|&&b| b).count() as f64 * self.dx * self.dx
    }

    /// Binary PGM with the top row at the largest imaginary part.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for row in (0..self.height).rev() {
            out.extend(self.mask[row * self.width..(row + 1) * self.width].iter().map(|&b| if b { 255u8 } else { 0 }));
        }
        out
    }
}

/// Rasterizes `∪ D(p, Im p)` over the sample points of the hull.
pub fn disk_cover(h: &HullSpec, raster_dx: f64) -> Result<DiskCover> {
    if !(raster_dx > 0.0) {
        return Err(Error::InvalidArgument(format!("raster_dx = {raster_dx}")));
    }
    let pts = h.sample_points(raster_dx)?;
    if pts.is_empty() {
        return Ok(DiskCover { x0: 0.0, dx: raster_dx, width: 0, height: 0, mask: Vec::new() });
    }
    let lo = pts.iter().map(|p| p.re - p.im).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.re + p.im).fold(f64::NEG_INFINITY, f64::max);
    let top = pts.iter().map(|p| 2.0 * p.im).fold(0.0, f64::max);
    let width = ((hi - lo) / raster_dx).ceil() as usize + 1;
    let height = (top / raster_dx).ceil() as usize + 1;
    let mut mask = vec![false; width * height];
    for p in &pts {
        let r = p.im;
        let c0 = (((p.re - r - lo) / raster_dx).floor().max(0.0)) as usize;
        let c1 = (((p.re + r - lo) / raster_dx).ceil() as usize).min(width - 1);
        let r1 = ((2.0 * r / raster_dx).ceil() as usize).min(height - 1);
        for row in 0..=r1 {
            let y = (row as f64 + 0.5) * raster_dx;
            for col in c0..=c1 {
                let x = lo + (col as f64 + 0.5) * raster_dx;
                if (C64::new(x, y) - p).norm() < r {
                    mask[row * width + col] = true;
                }
            }
        }
    }
    Ok(DiskCover { x0: lo, dx: raster_dx, width, height, mask })
}

/// Disk-cover area and the verdicts `area/66 < hcap` and `hcap < 7·area/(2π)`.
///
/// `hcap` defaults to [`hcap_exact`].
pub fn lln_bounds_check(h: &HullSpec, raster_dx: f64, hcap: Option<f64>) -> Result<(f64, bool, bool)> {
    if h.is_empty() {
        return Ok((0.0, true, true));
    }
    let cap = match hcap {
        Some(c) => c,
        None => hcap_exact(h)?,
    };
    let area = disk_cover(h, raster_dx)?.area();
    Ok((area, area / 66.0 < cap, cap < 7.0 / (2.0 * PI) * area))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values() {
        assert_eq!(hcap_exact(&HullSpec::HalfDisk { radius: 1.0 }).unwrap(), 1.0);
        assert_eq!(hcap_exact(&HullSpec::VerticalSlit { foot: 0.0, length: 1.0 }).unwrap(), 0.5);
        assert!(hcap_exact(&HullSpec::MappedBy(PickFunction::identity())).unwrap().abs() < 1e-12);
        let s = HullSpec::Sampled(SampledHull { points: vec![C64::new(0.0, 1.0)], spacing: 0.0, inside: None });
        assert_eq!(hcap_exact(&s), Err(Error::NoExactFormula));
    }

    #[test]
    fn two_point_diameter() {
        let r = transfinite_diameter(&[C64::new(0.0, 0.0), C64::new(1.0, 0.0)], 2).unwrap();
        assert!((r.d_n - 1.0).abs() < 1e-15);
        assert!(matches!(
            transfinite_diameter(&[C64::new(0.0, 0.0), C64::new(0.0, 0.0)], 2),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn empty_hull_bounds() {
        assert_eq!(lln_bounds_check(&HullSpec::HalfDisk { radius: 0.0 }, 0.01, None).unwrap(), (0.0, true, true));
    }
}
