//! Volterra transformations `g(x) = f(x) - \int_x^L K(x, y) f(y) dy` on
//! grid samples, their exact discrete inverse, and the boundary feedback
//! functional.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernels::{FeedbackGainRow, TriangleKernel};
use crate::mesh::{tail_weight, IntervalGrid};

/// Samples of a function on an [`IntervalGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: IntervalGrid,
    samples: Vec<f64>,
}

impl Field {
    pub fn new(grid: IntervalGrid, samples: Vec<f64>) -> Result<Self> {
        grid.check_len(&samples)?;
        Ok(Self { grid, samples })
    }

    pub fn from_fn(grid: &IntervalGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            samples: grid.sample(f),
            grid: grid.clone(),
        }
    }

    pub fn zeros(grid: &IntervalGrid) -> Self {
        Self {
            samples: vec![0.0; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn grid(&self) -> &IntervalGrid {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Trapezoid `L^2` norm.
    pub fn norm_l2(&self) -> f64 {
        l2_norm(&self.grid, &self.samples)
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        same_grid(&self.grid, &other.grid)?;
        Ok(Field {
            grid: self.grid.clone(),
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }
}

pub(crate) fn l2_norm(grid: &IntervalGrid, samples: &[f64]) -> f64 {
    let sq: Vec<f64> = samples.iter().map(|v| v * v).collect();
    grid.trapezoid().apply(&sq).max(0.0).sqrt()
}

fn same_grid(a: &IntervalGrid, b: &IntervalGrid) -> Result<()> {
    if !a.same_as(b) {
        return invalid(format!(
            "grid mismatch: {} nodes on [0, {}] vs {} nodes on [0, {}]",
            a.len(),
            a.length(),
            b.len(),
            b.length()
        ));
    }
    Ok(())
}

/// `g(x_i) = f(x_i) - sum_{j >= i} w_j K(x_i, y_j) f(y_j)` with trapezoid
/// weights on `[x_i, L]`.
pub fn apply_volterra<K: TriangleKernel + ?Sized>(kernel: &K, f: &Field) -> Result<Field> {
    same_grid(kernel.tri().base(), f.grid())?;
    let n = f.grid.len();
    let h = f.grid.spacing();
    let samples = (0..n)
        .map(|i| {
            let integral: f64 = (i..n)
                .map(|j| tail_weight(j, i, n, h) * kernel.at(i, j) * f.samples[j])
                .sum();
            f.samples[i] - integral
        })
        .collect();
    Ok(Field {
        grid: f.grid.clone(),
        samples,
    })
}

/// Solves the triangular system of [`apply_volterra`] for `f` by
/// back-substitution from `x = L`.
pub fn invert_volterra<K: TriangleKernel + ?Sized>(kernel: &K, g: &Field) -> Result<Field> {
    same_grid(kernel.tri().base(), g.grid())?;
    let n = g.grid.len();
    let h = g.grid.spacing();
    let mut f = vec![0.0; n];
    for i in (0..n).rev() {
        let coupling: f64 = (i + 1..n)
            .map(|j| tail_weight(j, i, n, h) * kernel.at(i, j) * f[j])
            .sum();
        let diagonal = 1.0 - tail_weight(i, i, n, h) * kernel.at(i, i);
        if diagonal == 0.0 || !diagonal.is_finite() {
            return invalid(format!("Volterra system singular at node {i}"));
        }
        f[i] = (g.samples[i] + coupling) / diagonal;
    }
    Ok(Field {
        grid: g.grid.clone(),
        samples: f,
    })
}

/// Trapezoid weights that turn `uhat` samples into the boundary input
/// `kappa = \int_0^L k(0, y) uhat(y) dy`.
pub fn feedback_weights(row: &FeedbackGainRow) -> Vec<f64> {
    row.grid
        .trapezoid()
        .weights()
        .iter()
        .zip(&row.samples)
        .map(|(w, k)| w * k)
        .collect()
}

/// `kappa = \int_0^L k(0, y) uhat(y) dy`.
pub fn feedback_control(row: &FeedbackGainRow, uhat: &Field) -> Result<f64> {
    same_grid(&row.grid, uhat.grid())?;
    Ok(feedback_weights(row)
        .iter()
        .zip(&uhat.samples)
        .map(|(w, u)| w * u)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::GainKernel;
    use crate::mesh::TriangleGrid;

    fn constant_kernel(n: usize, c: f64) -> GainKernel {
        let tri = TriangleGrid::new(IntervalGrid::new(1.0, n).unwrap());
        let len = tri.len();
        GainKernel::from_values(tri, vec![c; len], 0.0).unwrap()
    }

    #[test]
    fn zero_kernel_is_identity() {
        let k = constant_kernel(11, 0.0);
        let f = Field::from_fn(k.tri().base(), |x| (3.0 * x).sin());
        assert_eq!(apply_volterra(&k, &f).unwrap(), f);
        assert_eq!(invert_volterra(&k, &f).unwrap(), f);
    }

    #[test]
    fn unit_kernel_on_constant() {
        let k = constant_kernel(21, 1.0);
        let one = Field::from_fn(k.tri().base(), |_| 1.0);
        let g = apply_volterra(&k, &one).unwrap();
        for (x, v) in g.grid().nodes().iter().zip(g.samples()) {
            assert!((v - x).abs() <= 1e-12);
        }
        let back = invert_volterra(&k, &g).unwrap();
        for v in back.samples() {
            assert!((v - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn unit_kernel_inverse_of_identity_map() {
        // f - \int_x^1 f = x has the solution f = 1 exactly, and the
        // trapezoid rule integrates constants exactly
        let k = constant_kernel(41, 1.0);
        let g = Field::from_fn(k.tri().base(), |x| x);
        let f = invert_volterra(&k, &g).unwrap();
        assert!(f.samples().iter().all(|v| (v - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let k = constant_kernel(11, 0.5);
        let f = Field::zeros(&IntervalGrid::new(1.0, 12).unwrap());
        assert!(apply_volterra(&k, &f).is_err());
        assert!(invert_volterra(&k, &f).is_err());
    }

    #[test]
    fn feedback_of_linear_row() {
        let grid = IntervalGrid::new(1.0, 9).unwrap();
        let row = FeedbackGainRow {
            samples: grid.sample(|y| y),
            grid: grid.clone(),
        };
        let one = Field::from_fn(&grid, |_| 1.0);
        assert_eq!(feedback_control(&row, &one).unwrap(), 0.5);
        assert_eq!(feedback_control(&row, &Field::zeros(&grid)).unwrap(), 0.0);
    }

    #[test]
    fn field_rejects_wrong_length() {
        let grid = IntervalGrid::new(1.0, 9).unwrap();
        assert!(Field::new(grid, vec![0.0; 8]).is_err());
    }
}
