//! Real polynomials with ascending coefficients.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly {
    pub c: Vec<f64>,
}

impl Poly {
    pub fn new(mut c: Vec<f64>) -> Self {
        while c.len() > 1 && *c.last().unwrap() == 0.0 {
            c.pop();
        }
        if c.is_empty() {
            c.push(0.0);
        }
        Poly { c }
    }

    pub fn constant(a: f64) -> Self {
        Poly::new(vec![a])
    }

    /// x - a
    pub fn linear_root(a: f64) -> Self {
        Poly::new(vec![-a, 1.0])
    }

    pub fn from_roots(roots: &[f64]) -> Self {
        roots
            .iter()
            .fold(Poly::constant(1.0), |p, &r| p.mul(&Poly::linear_root(r)))
    }

    pub fn degree(&self) -> usize {
        self.c.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().all(|&x| x == 0.0)
    }

    pub fn add(&self, o: &Poly) -> Poly {
        let n = self.c.len().max(o.c.len());
        let mut c = vec![0.0; n];
        for (i, &v) in self.c.iter().enumerate() {
            c[i] += v;
        }
        for (i, &v) in o.c.iter().enumerate() {
            c[i] += v;
        }
        Poly::new(c)
    }

    pub fn sub(&self, o: &Poly) -> Poly {
        self.add(&o.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Poly {
        Poly::new(self.c.iter().map(|&v| v * s).collect())
    }

    pub fn mul(&self, o: &Poly) -> Poly {
        let mut c = vec![0.0; self.c.len() + o.c.len() - 1];
        for (i, &a) in self.c.iter().enumerate() {
            for (j, &b) in o.c.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        Poly::new(c)
    }

    /// Multiplication by x.
    pub fn shift_up(&self) -> Poly {
        let mut c = vec![0.0];
        c.extend_from_slice(&self.c);
        Poly::new(c)
    }

    pub fn deriv(&self) -> Poly {
        if self.c.len() == 1 {
            return Poly::constant(0.0);
        }
        Poly::new(
            self.c
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, &v)| i as f64 * v)
                .collect(),
        )
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
    }

    pub fn eval_c(&self, z: C64) -> C64 {
        self.c
            .iter()
            .rev()
            .fold(C64::new(0.0, 0.0), |acc, &v| acc * z + v)
    }

    /// Value and first derivative.
    pub fn eval_c_d(&self, z: C64) -> (C64, C64) {
        let mut p = C64::new(0.0, 0.0);
        let mut d = C64::new(0.0, 0.0);
        for &v in self.c.iter().rev() {
            d = d * z + p;
            p = p * z + v;
        }
        (p, d)
    }

    /// All complex roots, from the eigenvalues of the companion matrix.
    pub fn roots(&self) -> Vec<C64> {
        let n = self.degree();
        if n == 0 {
            return Vec::new();
        }
        let lead = self.c[n];
        if n == 1 {
            return vec![C64::new(-self.c[0] / lead, 0.0)];
        }
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            m[(i, i - 1)] = 1.0;
        }
        for i in 0..n {
            m[(i, n - 1)] = -self.c[i] / lead;
        }
        m.complex_eigenvalues().iter().copied().collect()
    }

    /// Companion eigenvalues refined by a few complex Newton steps.
    pub fn polished_roots(&self) -> Vec<C64> {
        self.roots()
            .into_iter()
            .map(|r0| {
                let mut r = r0;
                for _ in 0..20 {
                    let (p, d) = self.eval_c_d(r);
                    if d.norm() == 0.0 {
                        break;
                    }
                    let step = p / d;
                    r -= step;
                    if step.norm() <= 1e-16 * (1.0 + r.norm()) {
                        break;
                    }
                }
                if (r - r0).norm() > 1e-3 * (1.0 + r0.norm()) {
                    r0
                } else {
                    r
                }
            })
            .collect()
    }

    /// Roots whose imaginary part is within `tol * (1 + |root|)` after polishing.
    pub fn real_roots(&self, tol: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .polished_roots()
            .into_iter()
            .filter(|r| r.im.abs() <= tol * (1.0 + r.norm()))
            .map(|r| r.re)
            .collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }
}

/// Roots of a complex polynomial with ascending coefficients (Aberth iteration).
pub fn complex_roots(coeffs: &[C64]) -> Vec<C64> {
    let mut c: Vec<C64> = coeffs.to_vec();
    while c.len() > 1 && c.last().map_or(false, |v| v.norm() == 0.0) {
        c.pop();
    }
    let n = c.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let lead = c[n];
    let c: Vec<C64> = c.iter().map(|v| v / lead).collect();
    let eval = |z: C64| -> (C64, C64) {
        let mut p = C64::new(0.0, 0.0);
        let mut d = C64::new(0.0, 0.0);
        for &v in c.iter().rev() {
            d = d * z + p;
            p = p * z + v;
        }
        (p, d)
    };
    let radius = 1.0 + c[..n].iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut z: Vec<C64> = (0..n)
        .map(|k| C64::from_polar(0.5 * radius, 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / n as f64))
        .collect();
    for _ in 0..500 {
        let mut moved: f64 = 0.0;
        for i in 0..n {
            let (p, d) = eval(z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / d;
            let s: C64 = (0..n).filter(|&j| j != i).map(|j| 1.0 / (z[i] - z[j])).sum();
            let step = ratio / (1.0 - ratio * s);
            if step.is_finite() {
                z[i] -= step;
                moved = moved.max(step.norm() / (1.0 + z[i].norm()));
            }
        }
        if moved < 1e-15 {
            break;
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_of_product() {
        let p = Poly::from_roots(&[-2.0, 0.5, 3.0]);
        let r = p.real_roots(1e-10);
        assert_eq!(r.len(), 3);
        for (a, b) in r.iter().zip([-2.0, 0.5, 3.0]) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn complex_roots_filtered() {
        // (x^2 + 1)(x - 1)
        let p = Poly::new(vec![1.0, 0.0, 1.0]).mul(&Poly::linear_root(1.0));
        assert_eq!(p.real_roots(1e-10), vec![1.0]);
    }

    #[test]
    fn complex_roots_of_product() {
        let r = [C64::new(1.0, 2.0), C64::new(-0.5, 0.1), C64::new(3.0, -1.0)];
        // (z - r0)(z - r1)(z - r2)
        let mut c = vec![C64::new(1.0, 0.0)];
        for &x in &r {
            let mut n = vec![C64::new(0.0, 0.0); c.len() + 1];
            for (i, &v) in c.iter().enumerate() {
                n[i + 1] += v;
                n[i] -= v * x;
            }
            c = n;
        }
        let got = complex_roots(&c);
        for x in r {
            assert!(got.iter().any(|g| (g - x).norm() < 1e-12));
        }
    }

    #[test]
    fn derivative_pair() {
        let p = Poly::new(vec![1.0, -2.0, 0.0, 3.0]);
        let z = C64::new(0.3, 0.7);
        let (v, d) = p.eval_c_d(z);
        assert!((v - p.eval_c(z)).norm() < 1e-15);
        assert!((d - p.deriv().eval_c(z)).norm() < 1e-15);
    }
}
