//! Uniform grids on `[0, L]` and on the triangle `{0 <= x <= y <= L}`, plus
//! the trapezoid rule and finite-difference machinery the other modules share.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform nodes `x_i = i h` on `[0, L]`, with `x_{n-1} = L` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalGrid {
    length: f64,
    nodes: Vec<f64>,
}

impl IntervalGrid {
    pub const MIN_NODES: usize = 5;

    pub fn new(length: f64, n: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return invalid(format!("interval length must be positive, got {length}"));
        }
        if n < Self::MIN_NODES {
            return invalid(format!(
                "interval grid needs at least {} nodes, got {n}",
                Self::MIN_NODES
            ));
        }
        let h = length / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        nodes[n - 1] = length;
        Ok(Self { length, nodes })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.length / (self.nodes.len() - 1) as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Samples `f` at every node.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&x| f(x)).collect()
    }

    pub fn trapezoid(&self) -> QuadratureRule {
        QuadratureRule::trapezoid(self)
    }

    /// Trapezoid approximation of `\int_{x_from}^{L} f`.
    pub fn integrate(&self, samples: &[f64], from_index: usize) -> Result<f64> {
        self.check_len(samples)?;
        if from_index >= self.len() {
            return invalid(format!(
                "integration start {from_index} outside grid of {} nodes",
                self.len()
            ));
        }
        Ok(integrate_tail(samples, from_index, self.spacing()))
    }

    /// Nodal finite-difference derivative of order 1, 2 or 3.
    ///
    /// Interior nodes use centered second-order stencils; nodes too close to an
    /// end use a shifted window of the same width, which for order 3 is the
    /// 5-point one-sided formula.
    pub fn derivative(&self, samples: &[f64], order: usize) -> Result<Vec<f64>> {
        self.check_len(samples)?;
        if !(1..=3).contains(&order) {
            return invalid(format!("derivative order must be 1, 2 or 3, got {order}"));
        }
        let n = self.len();
        if n < 7 {
            return invalid(format!("derivatives need at least 7 nodes, got {n}"));
        }
        let width = match order {
            1 | 2 => 3,
            _ => 5,
        };
        let one_sided_width = order + 2;
        let scale = self.spacing().powi(order as i32);
        let out = (0..n)
            .map(|i| {
                let offsets = centered_or_shifted(i, 0, n - 1, width, one_sided_width)
                    .expect("grid has at least 7 nodes");
                let w = fd_weights(&offsets, order);
                offsets
                    .iter()
                    .zip(&w)
                    .map(|(&o, &c)| c * samples[(i as isize + o) as usize])
                    .sum::<f64>()
                    / scale
            })
            .collect();
        Ok(out)
    }

    pub(crate) fn check_len(&self, samples: &[f64]) -> Result<()> {
        if samples.len() != self.len() {
            return invalid(format!(
                "expected {} samples, got {}",
                self.len(),
                samples.len()
            ));
        }
        Ok(())
    }

    /// Two grids are interchangeable when node count and length agree exactly.
    pub fn same_as(&self, other: &IntervalGrid) -> bool {
        self.len() == other.len() && self.length == other.length
    }
}

/// Trapezoid weights, one per node.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn trapezoid(grid: &IntervalGrid) -> Self {
        let h = grid.spacing();
        let n = grid.len();
        let mut weights = vec![h; n];
        weights[0] = 0.5 * h;
        weights[n - 1] = 0.5 * h;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn apply(&self, samples: &[f64]) -> f64 {
        self.weights.iter().zip(samples).map(|(w, f)| w * f).sum()
    }
}

/// Trapezoid sum of `samples[from..]` with uniform spacing `h`.
pub(crate) fn integrate_tail(samples: &[f64], from: usize, h: f64) -> f64 {
    let tail = &samples[from..];
    match tail.len() {
        0 | 1 => 0.0,
        m => {
            let inner: f64 = tail[1..m - 1].iter().sum();
            h * (inner + 0.5 * (tail[0] + tail[m - 1]))
        }
    }
}

/// Weight of node `j` in the trapezoid rule on `[x_from, L]` over `n` nodes.
pub(crate) fn tail_weight(j: usize, from: usize, n: usize, h: f64) -> f64 {
    if from + 1 >= n {
        0.0
    } else if j == from || j == n - 1 {
        0.5 * h
    } else {
        h
    }
}

/// Lower-triangle index set `{(i, j) : j >= i}` over an [`IntervalGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleGrid {
    base: IntervalGrid,
}

impl TriangleGrid {
    pub fn new(base: IntervalGrid) -> Self {
        Self { base }
    }

    pub fn base(&self) -> &IntervalGrid {
        &self.base
    }

    pub fn n(&self) -> usize {
        self.base.len()
    }

    pub fn len(&self) -> usize {
        let n = self.n();
        n * (n + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat storage index of node `(i, j)`, `j >= i`, rows stored by `i`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= j && j < self.n());
        let n = self.n();
        i * n - i * i.saturating_sub(1) / 2 + (j - i)
    }

    pub fn is_diagonal(&self, i: usize, j: usize) -> bool {
        i == j
    }

    /// Node lies on the edge `y = L`.
    pub fn is_top_edge(&self, _i: usize, j: usize) -> bool {
        j == self.n() - 1
    }

    /// Node lies on the edge `x = 0`.
    pub fn is_left_edge(&self, i: usize, _j: usize) -> bool {
        i == 0
    }

    /// All nodes in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n();
        (0..n).flat_map(move |i| (i..n).map(move |j| (i, j)))
    }

    /// Mirror `(i, j) -> (n-1-j, n-1-i)`, i.e. `(x, y) -> (L - y, L - x)`.
    pub fn reflect(&self, i: usize, j: usize) -> (usize, usize) {
        let last = self.n() - 1;
        (last - j, last - i)
    }
}

/// Finite-difference weights for the `order`-th derivative at offset 0 from
/// samples at the given integer offsets (Fornberg's recursion, unit spacing).
pub fn fd_weights(offsets: &[isize], order: usize) -> Vec<f64> {
    let n = offsets.len();
    assert!(n > order, "need more points than the derivative order");
    let x: Vec<f64> = offsets.iter().map(|&o| o as f64).collect();
    // c[j][k]: weight of point j for derivative k
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = x[0];
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i];
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// Finite-difference weights as exact rationals rounded to double-double
/// `(hi, lo)` pairs, for residual evaluations where cancellation across the
/// stencil would otherwise swamp the result. Offsets must be distinct and
/// small (|offset| <= 20, at most 16 points).
pub fn exact_fd_weights(offsets: &[isize], order: usize) -> Vec<(f64, f64)> {
    assert!(offsets.len() <= 16 && offsets.iter().all(|o| o.abs() <= 20));
    let factorial: i128 = (1..=order as i128).product();
    offsets
        .iter()
        .enumerate()
        .map(|(i, &oi)| {
            // coefficients of prod_{j != i} (s - o_j), lowest degree first
            let mut poly: Vec<i128> = vec![1];
            let mut den: i128 = 1;
            for (j, &oj) in offsets.iter().enumerate() {
                if j == i {
                    continue;
                }
                let mut next = vec![0i128; poly.len() + 1];
                for (d, c) in poly.iter().enumerate() {
                    next[d + 1] += c;
                    next[d] -= c * oj as i128;
                }
                poly = next;
                den *= (oi - oj) as i128;
            }
            let mut num = poly.get(order).copied().unwrap_or(0) * factorial;
            let g = gcd(num.abs(), den.abs()).max(1);
            num /= g;
            den /= g;
            rational_to_dd(num, den)
        })
        .collect()
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn rational_to_dd(num: i128, den: i128) -> (f64, f64) {
    let n = num as f64;
    let d = den as f64;
    debug_assert!(n as i128 == num && d as i128 == den);
    let hi = n / d;
    let (p, pe) = two_prod(hi, d);
    (hi, ((n - p) - pe) / d)
}

/// Error-free sum: `a + b = s + e` exactly.
pub(crate) fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Error-free product: `a * b = p + e` exactly.
pub(crate) fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Double-double accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Compensated {
    hi: f64,
    lo: f64,
}

impl Compensated {
    pub(crate) fn add(&mut self, v: f64) {
        let (s, e) = two_sum(self.hi, v);
        self.hi = s;
        self.lo += e;
    }

    /// Adds `a * b` without rounding the product.
    pub(crate) fn add_prod(&mut self, a: f64, b: f64) {
        let (p, pe) = two_prod(a, b);
        self.add(p);
        self.lo += pe;
    }

    pub(crate) fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// Offsets of a contiguous `width`-point window around `pos`, kept inside
/// `[lo, hi]`. Returns `None` if the range holds fewer than `width` points.
pub fn clamped_window(pos: usize, lo: usize, hi: usize, width: usize) -> Option<Vec<isize>> {
    if hi < lo || hi - lo + 1 < width {
        return None;
    }
    let half = width / 2;
    let start = pos.saturating_sub(half).max(lo).min(hi + 1 - width);
    Some(
        (start..start + width)
            .map(|s| s as isize - pos as isize)
            .collect(),
    )
}

/// Centered window of odd `width` when it fits, else a clamped window of
/// `one_sided_width` points.
pub fn centered_or_shifted(
    pos: usize,
    lo: usize,
    hi: usize,
    width: usize,
    one_sided_width: usize,
) -> Option<Vec<isize>> {
    let half = width / 2;
    if pos >= lo + half && pos + half <= hi {
        Some((-(half as isize)..=half as isize).collect())
    } else {
        clamped_window(pos, lo, hi, one_sided_width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_grid_nodes() {
        let g = IntervalGrid::new(1.0, 5).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn last_node_is_exact() {
        let l = 2.0 * std::f64::consts::PI;
        let g = IntervalGrid::new(l, 101).unwrap();
        assert_eq!(g.node(100), l);
        let h = g.spacing();
        for w in g.nodes().windows(2) {
            assert!((w[1] - w[0] - h).abs() <= 8.0 * f64::EPSILON * l);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(IntervalGrid::new(1.0, 3).is_err());
        assert!(IntervalGrid::new(0.0, 10).is_err());
        assert!(IntervalGrid::new(-1.0, 10).is_err());
        assert!(IntervalGrid::new(f64::NAN, 10).is_err());
    }

    #[test]
    fn trapezoid_exact_for_lines() {
        let g = IntervalGrid::new(1.0, 11).unwrap();
        assert_eq!(g.integrate(&g.sample(|_| 1.0), 0).unwrap(), 1.0);
        assert!((g.integrate(&g.sample(|x| x), 0).unwrap() - 0.5).abs() < 1e-15);
        let sum: f64 = g.trapezoid().weights().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn trapezoid_of_square_on_three_nodes() {
        // the grid only allows n >= 5, so check the three-node rule directly
        let v = [0.0, 0.25, 1.0];
        assert!((integrate_tail(&v, 0, 0.5) - 0.375).abs() < 1e-15);
    }

    #[test]
    fn integrate_checks_input() {
        let g = IntervalGrid::new(1.0, 6).unwrap();
        assert!(g.integrate(&[1.0; 5], 0).is_err());
        assert!(g.integrate(&[1.0; 6], 6).is_err());
        assert_eq!(g.integrate(&[1.0; 6], 5).unwrap(), 0.0);
    }

    #[test]
    fn second_derivative_of_square() {
        let g = IntervalGrid::new(1.0, 21).unwrap();
        let d = g.derivative(&g.sample(|x| x * x), 2).unwrap();
        assert!(d.iter().all(|v| (v - 2.0).abs() < 1e-8));
    }

    #[test]
    fn derivatives_of_constants_vanish() {
        let g = IntervalGrid::new(3.0, 15).unwrap();
        for order in 1..=3 {
            let d = g.derivative(&[4.5; 15], order).unwrap();
            assert!(d.iter().all(|v| v.abs() < 1e-9), "order {order}");
        }
        assert!(g.derivative(&[0.0; 15], 4).is_err());
        assert!(g.derivative(&[0.0; 15], 0).is_err());
    }

    #[test]
    fn fornberg_matches_known_stencils() {
        let w = fd_weights(&[-2, -1, 0, 1, 2], 3);
        let expect = [-0.5, 1.0, 0.0, -1.0, 0.5];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-13);
        }
        let w = fd_weights(&[-1, 0, 1, 2, 3], 3);
        let expect = [-1.5, 5.0, -6.0, 3.0, -0.5];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = fd_weights(&[-3, -2, -1, 0], 2);
        let expect = [-1.0, 4.0, -5.0, 2.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_weights_agree_with_fornberg() {
        for offsets in [vec![-3isize, -2, -1, 0, 1, 2, 3], (0..11).collect(), (-10..=0).collect()] {
            for order in 1..=3 {
                let f = fd_weights(&offsets, order);
                let e = exact_fd_weights(&offsets, order);
                let scale = f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                for (a, (hi, lo)) in f.iter().zip(&e) {
                    assert!((a - hi - lo).abs() <= 1e-12 * scale);
                }
            }
        }
        assert_eq!(exact_fd_weights(&[-1, 0, 1], 1), vec![(-0.5, 0.0), (0.0, 0.0), (0.5, 0.0)]);
    }

    #[test]
    fn exact_weights_cancel_on_polynomials() {
        let offsets: Vec<isize> = (0..11).collect();
        let w = exact_fd_weights(&offsets, 3);
        let mut acc = Compensated::default();
        for (o, (hi, lo)) in offsets.iter().zip(&w) {
            let v = 3.0 * (*o as f64).powi(2) - 5.0 * *o as f64 + 7.0;
            acc.add_prod(*hi, v);
            acc.add_prod(*lo, v);
        }
        assert!(acc.value().abs() < 1e-25);
    }

    #[test]
    fn windows_stay_inside() {
        assert_eq!(clamped_window(0, 0, 10, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(clamped_window(10, 0, 10, 5).unwrap(), vec![-4, -3, -2, -1, 0]);
        assert_eq!(clamped_window(5, 0, 10, 5).unwrap(), vec![-2, -1, 0, 1, 2]);
        assert!(clamped_window(1, 0, 2, 5).is_none());
        assert_eq!(
            centered_or_shifted(1, 0, 10, 5, 5).unwrap(),
            vec![-1, 0, 1, 2, 3]
        );
    }

    #[test]
    fn triangle_indexing() {
        let t = TriangleGrid::new(IntervalGrid::new(1.0, 7).unwrap());
        assert_eq!(t.len(), 28);
        let idx: Vec<usize> = t.nodes().map(|(i, j)| t.index(i, j)).collect();
        assert_eq!(idx, (0..28).collect::<Vec<_>>());
        assert_eq!(t.nodes().filter(|&(i, j)| t.is_diagonal(i, j)).count(), 7);
        assert_eq!(t.nodes().filter(|&(i, j)| t.is_top_edge(i, j)).count(), 7);
        assert_eq!(t.reflect(0, 6), (0, 6));
        assert_eq!(t.reflect(1, 3), (3, 5));
    }
}
