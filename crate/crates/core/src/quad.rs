//! Gauss–Legendre rules and a few small numerical helpers.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn build(n: usize) -> GaussRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    GaussRule { nodes, weights }
}

/// Cached `n`-point rule.
pub fn gauss(n: usize) -> &'static GaussRule {
    static CACHE: OnceLock<Mutex<HashMap<usize, &'static GaussRule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("gauss cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| Box::leak(Box::new(build(n))))
}

/// Nodes and weights mapped onto [a, b].
pub fn gauss_on(n: usize, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> {
    let r = gauss(n);
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    r.nodes
        .iter()
        .zip(r.weights.iter())
        .map(move |(&x, &w)| (c + h * x, h * w))
}

/// Neville extrapolation of samples `(h_i, v_i)` to `h = 0`.
/// Returns the value and the difference between the last two diagonal entries.
pub fn neville_zero<T>(h: &[f64], v: &[T]) -> (T, f64)
where
    T: Copy
        + std::ops::Sub<Output = T>
        + std::ops::Mul<f64, Output = T>
        + std::ops::Add<Output = T>
        + Norm,
{
    let n = v.len();
    let mut p: Vec<T> = v.to_vec();
    let mut prev_diag = p[n - 1];
    let mut last = p[n - 1];
    for k in 1..n {
        for i in 0..n - k {
            let num = p[i + 1] * h[i] - p[i] * h[i + k];
            p[i] = num * (1.0 / (h[i] - h[i + k]));
        }
        prev_diag = last;
        last = p[0];
    }
    let err = if n > 1 { (last - prev_diag).norm() } else { f64::INFINITY };
    (last, err)
}

/// Magnitude used by the extrapolation helpers.
pub trait Norm {
    fn norm(self) -> f64;
}

impl Norm for f64 {
    fn norm(self) -> f64 {
        self.abs()
    }
}

impl Norm for num_complex::Complex64 {
    fn norm(self) -> f64 {
        num_complex::Complex64::norm(self)
    }
}

/// Pairwise summation, independent of thread scheduling.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}
