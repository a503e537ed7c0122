//! Oracles shared by the integration tests.
#![allow(dead_code)]

/// Power-series reference for the gain kernel on the triangle.
///
/// In `t = x + y`, `s = y - x` the kernel is written `k = sum_m g_m(t) s^m`
/// with polynomial `g_m`. Collecting powers of `s` in the PDE gives a
/// two-step recursion for `g_m'`; the integration constants come from
/// `k(x, L) = 0` expanded around `t = 2L`. The diagonal data fix `g_0 = 0`
/// and `g_1 = lambda (t - 2L) / 6`.
pub struct SeriesKernel {
    coeffs: Vec<Vec<f64>>,
}

fn poly_eval(p: &[f64], t: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

fn poly_der(p: &[f64], r: usize) -> Vec<f64> {
    let mut q = p.to_vec();
    for _ in 0..r {
        if q.len() <= 1 {
            return vec![0.0];
        }
        q = q.iter().enumerate().skip(1).map(|(i, c)| c * i as f64).collect();
    }
    q
}

fn factorial(r: usize) -> f64 {
    (1..=r).map(|v| v as f64).product()
}

impl SeriesKernel {
    pub fn new(length: f64, lambda: f64, terms: usize) -> Self {
        let mut g: Vec<Vec<f64>> = vec![vec![0.0], vec![-2.0 * length * lambda / 6.0, lambda / 6.0]];
        for m in 0..terms.saturating_sub(2) {
            let gm = &g[m];
            let d3 = poly_der(gm, 3);
            let d1 = poly_der(gm, 1);
            let len = gm.len().max(d1.len()).max(d3.len());
            let at = |p: &[f64], i: usize| p.get(i).copied().unwrap_or(0.0);
            let denom = 6.0 * ((m + 2) * (m + 1)) as f64;
            let rhs: Vec<f64> = (0..len)
                .map(|i| (-2.0 * at(&d3, i) - 2.0 * at(&d1, i) - lambda * at(gm, i)) / denom)
                .collect();
            let mut next = vec![0.0];
            next.extend(rhs.iter().enumerate().map(|(i, c)| c / (i + 1) as f64));
            let big_n = m + 2;
            let mut total = 0.0;
            for (mm, gmm) in g.iter().enumerate().take(big_n) {
                let r = big_n - mm;
                let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
                total += poly_eval(&poly_der(gmm, r), 2.0 * length) * sign / factorial(r);
            }
            let current = poly_eval(&next, 2.0 * length);
            next[0] -= total + current;
            g.push(next);
        }
        Self { coeffs: g }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let t = x + y;
        let s = y - x;
        let mut acc = 0.0;
        let mut sp = 1.0;
        for gm in &self.coeffs {
            acc += poly_eval(gm, t) * sp;
            sp *= s;
        }
        acc
    }
}

/// Reference values at lambda = 1, L = 1, produced by the series above with
/// 60 terms and frozen here.
pub const K_0_QUARTER: f64 = -0.06237798675745679;
pub const K_0_HALF: f64 = -0.08261160773860415;
pub const K_0_THREE_QUARTERS: f64 = -0.06116524463215291;
pub const K_MAX_ABS: f64 = 0.08261160773860415;

/// Deterministic xorshift stream for fixtures, so tests do not depend on an
/// RNG crate's value stability.
pub struct Stream(u64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self(seed.max(1))
    }
    pub fn next_f64(&mut self) -> f64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
    /// Uniform on `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}
