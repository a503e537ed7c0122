mod support;

use kdv_backstep::kernels::{
    feedback_gain_row, gain_kernel_from_observer, injection_gain, kernel_residual, observer_kernel_from_gain,
    solve_gain_kernel, solve_observer_kernel, TriangleKernel, DEFAULT_KERNEL_TOL,
};
use kdv_backstep::mesh::{IntervalGrid, TriangleGrid};
use support::SeriesKernel;

fn tri(length: f64, n: usize) -> TriangleGrid {
    TriangleGrid::new(IntervalGrid::new(length, n).unwrap())
}

#[test]
fn series_reproduces_frozen_values() {
    let s = SeriesKernel::new(1.0, 1.0, 60);
    assert!((s.value(0.0, 0.25) - support::K_0_QUARTER).abs() < 1e-14);
    assert!((s.value(0.0, 0.5) - support::K_0_HALF).abs() < 1e-14);
    assert!((s.value(0.0, 0.75) - support::K_0_THREE_QUARTERS).abs() < 1e-14);
}

#[test]
fn series_meets_boundary_data() {
    let s = SeriesKernel::new(1.0, 1.0, 60);
    for i in 0..=20 {
        let x = i as f64 / 20.0;
        assert!(s.value(x, x).abs() < 1e-13, "diagonal at {x}");
        assert!(s.value(x, 1.0).abs() < 1e-12, "top edge at {x}");
    }
    // along the diagonal k stays zero, so k_y - k_x there carries the
    // whole slope, and that must equal 2 lambda (x - L) / 3
    let e = 1e-5;
    for x in [0.1, 0.4, 0.7] {
        let across = (s.value(x - e, x + e) - s.value(x + e, x - e)) / (2.0 * e);
        let expected = 2.0 * (x - 1.0) / 3.0;
        assert!((across - expected).abs() < 1e-6, "slope at {x}: {across} vs {expected}");
    }
}

#[test]
fn series_satisfies_kernel_pde() {
    let s = SeriesKernel::new(1.0, 1.0, 60);
    let e = 1e-3;
    let d3 = |f: &dyn Fn(f64) -> f64, z: f64| {
        (f(z + 2.0 * e) - 2.0 * f(z + e) + 2.0 * f(z - e) - f(z - 2.0 * e)) / (2.0 * e.powi(3))
    };
    let d1 = |f: &dyn Fn(f64) -> f64, z: f64| (f(z + e) - f(z - e)) / (2.0 * e);
    for (x, y) in [(0.2, 0.6), (0.1, 0.3), (0.5, 0.8)] {
        let kxxx = d3(&|z| s.value(z, y), x);
        let kyyy = d3(&|z| s.value(x, z), y);
        let kx = d1(&|z| s.value(z, y), x);
        let ky = d1(&|z| s.value(x, z), y);
        let r = kxxx + kyyy + kx + ky + s.value(x, y);
        assert!(r.abs() < 1e-4, "residual {r} at ({x}, {y})");
    }
}

#[test]
fn solved_gain_converges_to_series() {
    let s = SeriesKernel::new(1.0, 1.0, 60);
    let mut errors = Vec::new();
    for n in [41, 81] {
        let k = solve_gain_kernel(&tri(1.0, n), 1.0, DEFAULT_KERNEL_TOL).unwrap();
        let grid = k.tri().base().clone();
        let mut err = 0.0_f64;
        for i in 0..n {
            for j in i..n {
                err = err.max((k.at(i, j) - s.value(grid.node(i), grid.node(j))).abs());
            }
        }
        errors.push(err / support::K_MAX_ABS);
    }
    assert!(errors[1] < 1e-3, "{errors:?}");
    assert!(errors[0] / errors[1] > 2.0, "{errors:?}");
}

#[test]
fn solved_gain_on_longer_interval_matches_series() {
    let s = SeriesKernel::new(2.0, 0.5, 80);
    let k = solve_gain_kernel(&tri(2.0, 81), 0.5, DEFAULT_KERNEL_TOL).unwrap();
    let grid = k.tri().base().clone();
    let scale = k.max_abs();
    for j in [20, 40, 60] {
        let gap = (k.at(0, j) - s.value(0.0, grid.node(j))).abs();
        assert!(gap < 1e-3 * scale, "k(0, {}) off by {gap}", grid.node(j));
    }
}

#[test]
fn residual_report_certifies_solution() {
    let k = solve_gain_kernel(&tri(1.0, 61), 2.0, DEFAULT_KERNEL_TOL).unwrap();
    let fresh = kernel_residual(&k);
    assert!(fresh.interior_rms <= 1e-4 * k.max_abs());
    assert!(fresh.diagonal_max < 1e-14);
    assert!(fresh.edge_max < 1e-14);
    assert!(fresh.interior_rows > 0);
}

#[test]
fn reflections_are_inverse() {
    let k = solve_gain_kernel(&tri(1.0, 41), 1.5, DEFAULT_KERNEL_TOL).unwrap();
    let back = gain_kernel_from_observer(&observer_kernel_from_gain(&k));
    assert_eq!(back.values(), k.values());
}

#[test]
fn gains_are_kernel_slices() {
    let k = solve_gain_kernel(&tri(1.0, 41), 1.0, DEFAULT_KERNEL_TOL).unwrap();
    let p = observer_kernel_from_gain(&k);
    let row = feedback_gain_row(&k);
    let p1 = injection_gain(&p);
    for j in 0..41 {
        assert_eq!(row.samples[j], k.at(0, j));
        assert_eq!(p1.samples[j], k.at(0, 40 - j));
    }
}

#[test]
fn observer_solve_has_its_own_report() {
    let p = solve_observer_kernel(&tri(1.0, 41), 1.0, DEFAULT_KERNEL_TOL).unwrap();
    let report = p.residual_report().expect("direct solve carries a report");
    assert!(report.interior_rms <= 1e-4 * p.max_abs());
    assert!(observer_kernel_from_gain(&solve_gain_kernel(p.tri(), 1.0, DEFAULT_KERNEL_TOL).unwrap())
        .residual_report()
        .is_none());
}

#[test]
fn too_coarse_grid_is_rejected() {
    assert!(solve_gain_kernel(&tri(1.0, 11), 1.0, DEFAULT_KERNEL_TOL).is_err());
}
