//! Finite measures on the real line: atoms plus one uniform-grid density.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    #[serde(rename = "x")]
    pub location: f64,
    #[serde(rename = "w")]
    pub weight: f64,
}

impl Atom {
    pub fn new(location: f64, weight: f64) -> Self {
        Atom { location, weight }
    }
}

/// Density samples on the grid `x0 + k dx`, integrated by the trapezoid rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub x0: f64,
    pub dx: f64,
    pub values: Vec<f64>,
}

impl GridDensity {
    pub fn new(x0: f64, dx: f64, values: Vec<f64>) -> Self {
        GridDensity { x0, dx, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn x(&self, k: usize) -> f64 {
        self.x0 + k as f64 * self.dx
    }

    pub fn x_hi(&self) -> f64 {
        self.x(self.len().saturating_sub(1))
    }

    /// Trapezoid weight of node `k`.
    pub fn weight(&self, k: usize) -> f64 {
        let n = self.len();
        if n == 1 {
            0.0
        } else if k == 0 || k + 1 == n {
            0.5 * self.dx
        } else {
            self.dx
        }
    }

    pub fn mass(&self) -> f64 {
        (0..self.len()).map(|k| self.weight(k) * self.values[k]).sum()
    }

    /// Piecewise-linear interpolant, zero outside the grid.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let s = (x - self.x0) / self.dx;
        if s < 0.0 || s > (n - 1) as f64 {
            return 0.0;
        }
        let k = (s.floor() as usize).min(n - 2);
        let f = s - k as f64;
        self.values[k] * (1.0 - f) + self.values[k + 1] * f
    }

    /// Integral of the interpolant over (-inf, x].
    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.len();
        if n < 2 || x <= self.x0 {
            return 0.0;
        }
        let s = (x - self.x0) / self.dx;
        if s >= (n - 1) as f64 {
            return self.mass();
        }
        let k = s.floor() as usize;
        let mut acc = 0.0;
        for j in 0..k {
            acc += 0.5 * self.dx * (self.values[j] + self.values[j + 1]);
        }
        let f = s - k as f64;
        let v0 = self.values[k];
        let v1 = self.values[k + 1];
        acc + self.dx * (v0 * f + 0.5 * (v1 - v0) * f * f)
    }
}

/// Finite nonnegative Borel measure on the real line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    #[serde(default)]
    pub atoms: Vec<Atom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<GridDensity>,
}

impl Measure {
    pub fn zero() -> Self {
        Measure::default()
    }

    pub fn dirac(x: f64) -> Self {
        Measure { atoms: vec![Atom::new(x, 1.0)], density: None }
    }

    /// Atoms from `(location, weight)` pairs, canonicalized.
    pub fn discrete(pairs: &[(f64, f64)]) -> Result<Self> {
        let m = Measure {
            atoms: pairs.iter().map(|&(x, w)| Atom::new(x, w)).collect(),
            density: None,
        };
        canonicalize(&m, default_merge_tol(&m))
    }

    pub fn from_density(d: GridDensity) -> Result<Self> {
        let m = Measure { atoms: Vec::new(), density: Some(d) };
        m.validate()?;
        Ok(m)
    }

    /// Tabulates `f` on `n` nodes spanning `[lo, hi]`.
    pub fn from_fn(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let dx = (hi - lo) / (n - 1) as f64;
        let values = (0..n).map(|k| f(lo + k as f64 * dx).max(0.0)).collect();
        Measure::from_density(GridDensity::new(lo, dx, values))
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.atoms {
            if !a.location.is_finite() || !a.weight.is_finite() {
                return Err(Error::InvalidMeasure("non-finite atom".into()));
            }
            if a.weight < 0.0 {
                return Err(Error::InvalidMeasure(format!("negative weight {}", a.weight)));
            }
        }
        if let Some(d) = &self.density {
            if !(d.dx > 0.0) || !d.x0.is_finite() {
                return Err(Error::InvalidMeasure("grid spacing must be positive".into()));
            }
            if d.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidMeasure("density values must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn is_discrete(&self) -> bool {
        self.density.as_ref().map_or(true, |d| d.values.iter().all(|&v| v == 0.0))
    }

    pub fn atom_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn density_mass(&self) -> f64 {
        self.density.as_ref().map_or(0.0, |d| d.mass())
    }

    pub fn mass(&self) -> f64 {
        self.atom_mass() + self.density_mass()
    }

    pub fn is_probability(&self, tol: f64) -> bool {
        (self.mass() - 1.0).abs() <= tol
    }

    /// Smallest interval carrying all atoms and density nodes with positive value.
    pub fn support_hull(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for a in &self.atoms {
            if a.weight > 0.0 {
                lo = lo.min(a.location);
                hi = hi.max(a.location);
            }
        }
        if let Some(d) = &self.density {
            let n = d.len();
            for k in 0..n {
                let nonzero = d.values[k] > 0.0
                    || (k > 0 && d.values[k - 1] > 0.0)
                    || (k + 1 < n && d.values[k + 1] > 0.0);
                if nonzero {
                    lo = lo.min(d.x(k));
                    hi = hi.max(d.x(k));
                }
            }
        }
        (lo <= hi).then_some((lo, hi))
    }

    pub fn scaled(&self, s: f64) -> Measure {
        Measure {
            atoms: self.atoms.iter().map(|a| Atom::new(a.location, a.weight * s)).collect(),
            density: self.density.as_ref().map(|d| {
                GridDensity::new(d.x0, d.dx, d.values.iter().map(|v| v * s).collect())
            }),
        }
    }

    pub fn translated(&self, a: f64) -> Measure {
        Measure {
            atoms: self.atoms.iter().map(|t| Atom::new(t.location + a, t.weight)).collect(),
            density: self.density.as_ref().map(|d| GridDensity::new(d.x0 + a, d.dx, d.values.clone())),
        }
    }

    /// Sum of two measures; densities are merged onto a common grid.
    pub fn plus(&self, o: &Measure) -> Measure {
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&o.atoms);
        let density = match (&self.density, &o.density) {
            (None, None) => None,
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (Some(a), Some(b)) => Some(superpose(&[(a, 0.0, 1.0), (b, 0.0, 1.0)])),
        };
        Measure { atoms, density }
    }

    /// Cumulative distribution function, right-continuous.
    pub fn cdf(&self, x: f64) -> f64 {
        let a: f64 = self.atoms.iter().filter(|a| a.location <= x).map(|a| a.weight).sum();
        a + self.density.as_ref().map_or(0.0, |d| d.cdf(x))
    }

    /// Left limit of the distribution function.
    pub fn cdf_left(&self, x: f64) -> f64 {
        let a: f64 = self.atoms.iter().filter(|a| a.location < x).map(|a| a.weight).sum();
        a + self.density.as_ref().map_or(0.0, |d| d.cdf(x))
    }

    pub fn mean(&self) -> f64 {
        let m = self.mass();
        if m == 0.0 {
            0.0
        } else {
            moment(self, 1) / m
        }
    }

    pub fn variance(&self) -> f64 {
        variance(self)
    }

    /// CSV rows `x,F(x)` over the union of atom locations and grid nodes.
    pub fn cdf_csv(&self) -> String {
        let mut xs: Vec<f64> = self.atoms.iter().map(|a| a.location).collect();
        if let Some(d) = &self.density {
            xs.extend((0..d.len()).map(|k| d.x(k)));
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        let mut s = String::from("x,F\n");
        for x in xs {
            s.push_str(&format!("{:.16e},{:.16e}\n", x, self.cdf(x)));
        }
        s
    }
}

/// Superposition of densities, each shifted by `shift` and scaled by `scale`,
/// on a grid with the finest spacing. Each part keeps its trapezoid mass.
pub(crate) fn superpose(parts: &[(&GridDensity, f64, f64)]) -> GridDensity {
    let dx = parts.iter().map(|p| p.0.dx).fold(f64::INFINITY, f64::min);
    let lo = parts.iter().map(|p| p.0.x0 + p.1).fold(f64::INFINITY, f64::min);
    let hi = parts.iter().map(|p| p.0.x_hi() + p.1).fold(f64::NEG_INFINITY, f64::max);
    let n = (((hi - lo) / dx).ceil() as usize + 1).max(2);
    let mut out = GridDensity::new(lo, dx, vec![0.0; n]);
    let mut buf = vec![0.0; n];
    for &(d, shift, scale) in parts {
        let target = d.mass() * scale;
        if target == 0.0 {
            continue;
        }
        for (k, b) in buf.iter_mut().enumerate() {
            *b = d.eval(out.x(k) - shift);
        }
        let m: f64 = (0..n).map(|k| out.weight(k) * buf[k]).sum();
        if m > 0.0 {
            let r = target / m;
            for k in 0..n {
                out.values[k] += buf[k] * r;
            }
        } else {
            // Narrower than one cell: deposit the mass on the nearest node.
            let c = d.x0 + shift + 0.5 * (d.x_hi() - d.x0);
            let k = (((c - lo) / dx).round() as usize).min(n - 1);
            out.values[k] += target / out.weight(k).max(dx * 0.5);
        }
    }
    out
}

/// Default merge tolerance `1e-12 (1 + span)`.
pub fn default_merge_tol(m: &Measure) -> f64 {
    let span = m
        .atoms
        .iter()
        .map(|a| a.location.abs())
        .fold(0.0, f64::max);
    1e-12 * (1.0 + span)
}

/// Sorts atoms, merges those closer than `merge_tol` and drops zero weights.
pub fn canonicalize(m: &Measure, merge_tol: f64) -> Result<Measure> {
    if merge_tol < 0.0 {
        return Err(Error::InvalidArgument("merge_tol must be nonnegative".into()));
    }
    m.validate()?;
    let mut atoms: Vec<Atom> = m.atoms.iter().copied().filter(|a| a.weight > 0.0).collect();
    atoms.sort_by(|a, b| a.location.partial_cmp(&b.location).unwrap());
    let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
    // Each cluster is anchored at its first location.
    let mut anchor = f64::NAN;
    for a in atoms {
        match merged.last_mut() {
            Some(last) if a.location - anchor < merge_tol || a.location == last.location => {
                let w = last.weight + a.weight;
                last.location = (last.location * last.weight + a.location * a.weight) / w;
                last.weight = w;
            }
            _ => {
                anchor = a.location;
                merged.push(a);
            }
        }
    }
    Ok(Measure { atoms: merged, density: m.density.clone() })
}

/// Raw moment `∫ x^n dμ`: exact over atoms, trapezoid over the density.
pub fn moment(m: &Measure, n: u32) -> f64 {
    moment_flagged(m, n).0
}

/// Moment together with a flag raised for zero-mass measures.
pub fn moment_flagged(m: &Measure, n: u32) -> (f64, bool) {
    if m.mass() == 0.0 {
        return (0.0, true);
    }
    let mut s: f64 = m.atoms.iter().map(|a| a.weight * a.location.powi(n as i32)).sum();
    if let Some(d) = &m.density {
        s += (0..d.len())
            .map(|k| d.weight(k) * d.values[k] * d.x(k).powi(n as i32))
            .sum::<f64>();
    }
    (s, false)
}

/// `M2 - M1^2 / mass`.
pub fn variance(m: &Measure) -> f64 {
    let mass = m.mass();
    if mass == 0.0 {
        return 0.0;
    }
    let m1 = moment(m, 1);
    moment(m, 2) - m1 * m1 / mass
}

/// Classical (additive) convolution.
pub fn classical_convolve(a: &Measure, b: &Measure) -> Result<Measure> {
    a.validate()?;
    b.validate()?;
    let mut atoms = Vec::with_capacity(a.atoms.len() * b.atoms.len());
    for x in &a.atoms {
        for y in &b.atoms {
            atoms.push(Atom::new(x.location + y.location, x.weight * y.weight));
        }
    }
    let mut parts: Vec<GridDensity> = Vec::new();
    let mut shifted: Vec<(usize, f64, f64)> = Vec::new();
    if let Some(db) = &b.density {
        parts.push(db.clone());
        for x in &a.atoms {
            shifted.push((parts.len() - 1, x.location, x.weight));
        }
    }
    if let Some(da) = &a.density {
        parts.push(da.clone());
        for y in &b.atoms {
            shifted.push((parts.len() - 1, y.location, y.weight));
        }
    }
    if let (Some(da), Some(db)) = (&a.density, &b.density) {
        parts.push(density_convolve(da, db));
        shifted.push((parts.len() - 1, 0.0, 1.0));
    }
    let density = if shifted.is_empty() {
        None
    } else {
        let refs: Vec<(&GridDensity, f64, f64)> =
            shifted.iter().map(|&(i, s, w)| (&parts[i], s, w)).collect();
        Some(superpose(&refs))
    };
    let out = Measure { atoms, density };
    canonicalize(&out, default_merge_tol(&out))
}

/// Lattice convolution of two densities; the output carries the exact product mass.
fn density_convolve(a: &GridDensity, b: &GridDensity) -> GridDensity {
    let dx = a.dx.min(b.dx);
    let ra = resample(a, dx);
    let rb = resample(b, dx);
    let na = ra.len();
    let nb = rb.len();
    let wa: Vec<f64> = (0..na).map(|k| ra.weight(k) * ra.values[k]).collect();
    let wb: Vec<f64> = (0..nb).map(|k| rb.weight(k) * rb.values[k]).collect();
    let n = na + nb - 1;
    let mut c = vec![0.0; n];
    for (i, &x) in wa.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in wb.iter().enumerate() {
            c[i + j] += x * y;
        }
    }
    let mut out = GridDensity::new(ra.x0 + rb.x0, dx, vec![0.0; n]);
    for k in 0..n {
        out.values[k] = c[k] / out.weight(k);
    }
    out
}

fn resample(d: &GridDensity, dx: f64) -> GridDensity {
    if (d.dx - dx).abs() <= 1e-15 * dx {
        return d.clone();
    }
    let n = (((d.x_hi() - d.x0) / dx).ceil() as usize + 1).max(2);
    let mut out = GridDensity::new(d.x0, dx, vec![0.0; n]);
    for k in 0..n {
        out.values[k] = d.eval(out.x(k));
    }
    let m = out.mass();
    if m > 0.0 {
        let r = d.mass() / m;
        out.values.iter_mut().for_each(|v| *v *= r);
    }
    out
}

/// Distribution function with logarithmic-time evaluation.
pub(crate) struct CdfTable<'a> {
    atom_x: Vec<f64>,
    atom_cum: Vec<f64>,
    dens: Option<(&'a GridDensity, Vec<f64>)>,
}

impl<'a> CdfTable<'a> {
    pub(crate) fn new(m: &'a Measure) -> Self {
        let mut atoms = m.atoms.clone();
        atoms.sort_by(|a, b| a.location.partial_cmp(&b.location).unwrap());
        let mut acc = 0.0;
        let atom_cum = atoms
            .iter()
            .map(|a| {
                acc += a.weight;
                acc
            })
            .collect();
        let dens = m.density.as_ref().map(|d| {
            let mut pre = vec![0.0; d.len()];
            for k in 1..d.len() {
                pre[k] = pre[k - 1] + 0.5 * d.dx * (d.values[k - 1] + d.values[k]);
            }
            (d, pre)
        });
        CdfTable { atom_x: atoms.iter().map(|a| a.location).collect(), atom_cum, dens }
    }

    fn atoms_upto(&self, x: f64, inclusive: bool) -> f64 {
        let k = if inclusive {
            self.atom_x.partition_point(|&a| a <= x)
        } else {
            self.atom_x.partition_point(|&a| a < x)
        };
        if k == 0 {
            0.0
        } else {
            self.atom_cum[k - 1]
        }
    }

    fn dens(&self, x: f64) -> f64 {
        let Some((d, pre)) = &self.dens else { return 0.0 };
        let n = d.len();
        if n < 2 || x <= d.x0 {
            return 0.0;
        }
        let s = (x - d.x0) / d.dx;
        if s >= (n - 1) as f64 {
            return pre[n - 1];
        }
        let k = s.floor() as usize;
        let f = s - k as f64;
        let (v0, v1) = (d.values[k], d.values[k + 1]);
        pre[k] + d.dx * (v0 * f + 0.5 * (v1 - v0) * f * f)
    }

    pub(crate) fn right(&self, x: f64) -> f64 {
        self.atoms_upto(x, true) + self.dens(x)
    }

    pub(crate) fn left(&self, x: f64) -> f64 {
        self.atoms_upto(x, false) + self.dens(x)
    }
}

/// Lévy distance between two probability measures.
pub fn levy_distance(a: &Measure, b: &Measure) -> Result<f64> {
    for m in [a, b] {
        let mass = m.mass();
        if (mass - 1.0).abs() > LEVY_MASS_TOL {
            return Err(Error::NotProbability(mass));
        }
    }
    let pts_a = breakpoints(a);
    let pts_b = breakpoints(b);
    let ca = CdfTable::new(a);
    let cb = CdfTable::new(b);
    let feasible = |eps: f64| -> bool {
        // F_a(x - eps) - eps <= F_b(x)
        let ok1 = pts_b
            .iter()
            .copied()
            .chain(pts_a.iter().map(|p| p + eps))
            .all(|x| {
                ca.right(x - eps) - eps <= cb.right(x) + 1e-15
                    && ca.left(x - eps) - eps <= cb.left(x) + 1e-15
            });
        if !ok1 {
            return false;
        }
        // F_b(x) <= F_a(x + eps) + eps
        pts_b
            .iter()
            .copied()
            .chain(pts_a.iter().map(|p| p - eps))
            .all(|x| {
                cb.right(x) <= ca.right(x + eps) + eps + 1e-15
                    && cb.left(x) <= ca.left(x + eps) + eps + 1e-15
            })
    };
    if feasible(0.0) {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Mass tolerance accepted by [`levy_distance`].
pub const LEVY_MASS_TOL: f64 = 1e-3;

fn breakpoints(m: &Measure) -> Vec<f64> {
    let mut v: Vec<f64> = m.atoms.iter().map(|a| a.location).collect();
    if let Some(d) = &m.density {
        v.extend((0..d.len()).map(|k| d.x(k)));
    }
    v
}
