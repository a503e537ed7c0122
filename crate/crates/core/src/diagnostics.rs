//! Lyapunov functionals, decay-rate fits, the boundary trace inequality,
//! weight selection and dense spectra of discrete operators.

use serde::{Deserialize, Serialize};

use crate::dynamics::{plant_parts, trace_second_derivative, DiscreteOperator, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::kernels::{GainKernel, InjectionGain};
use crate::mesh::IntervalGrid;
use crate::transforms::{apply_volterra, l2_norm, Field};

/// Right-hand side `-w_x - w_xxx - lambda w` of the target equation, with the
/// stencils and boundary closure the integrator uses.
pub struct TargetRhs {
    grid: IntervalGrid,
    a0: faer::Mat<f64>,
    lambda: f64,
}

impl TargetRhs {
    pub fn new(grid: &IntervalGrid, lambda: f64) -> Result<Self> {
        Ok(Self {
            grid: grid.clone(),
            a0: plant_parts(grid)?.a0,
            lambda,
        })
    }

    /// Full-grid samples of `w_t` (zero at both ends).
    pub fn apply(&self, w: &Field) -> Vec<f64> {
        let s = w.samples();
        let m = self.a0.nrows();
        let mut out = vec![0.0; m + 2];
        for j in 0..m {
            let v = s[j + 1];
            if v == 0.0 {
                continue;
            }
            for i in 0..m {
                out[i + 1] += self.a0[(i, j)] * v;
            }
        }
        for i in 0..m {
            out[i + 1] -= self.lambda * s[i + 1];
        }
        out
    }

    pub fn grid(&self) -> &IntervalGrid {
        &self.grid
    }
}

fn derivative_norm(f: &Field, order: usize) -> Result<f64> {
    let d = f.grid().derivative(f.samples(), order)?;
    Ok(l2_norm(f.grid(), &d))
}

/// Discrete `H^3` norm `||f|| + ||f_xxx||`.
pub fn h3_norm(f: &Field) -> Result<f64> {
    Ok(f.norm_l2() + derivative_norm(f, 3)?)
}

/// Per-step Lyapunov functionals of a `(what, wtilde)` run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSeries {
    pub times: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
    /// `(B/2) ||wtilde_xxx||^2`
    pub v3_tilde: Vec<f64>,
    pub v: Vec<f64>,
    pub norm_what: Vec<f64>,
    pub norm_wtilde: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

/// `V1 = (A/2)||what||^2`, `V2 = (B/2)||wtilde||^2`, `V3 = (B/2)||wtilde_t||^2`
/// with `wtilde_t` from the target right-hand side. The trajectory must carry
/// two fields.
pub fn lyapunov_series(traj: &Trajectory, a: f64, b: f64) -> Result<LyapunovSeries> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return invalid(format!("weights must be positive, got A = {a}, B = {b}"));
    }
    let first = traj
        .snapshots
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
    if first.fields.len() < 2 {
        return invalid("Lyapunov series needs a trajectory with both what and wtilde");
    }
    let rhs = TargetRhs::new(first.fields[0].grid(), traj.lambda)?;
    let mut out = LyapunovSeries {
        a,
        b,
        ..Default::default()
    };
    for s in &traj.snapshots {
        let (what, wtilde) = (&s.fields[0], &s.fields[1]);
        let nh = what.norm_l2();
        let nt = wtilde.norm_l2();
        let wt = l2_norm(wtilde.grid(), &rhs.apply(wtilde));
        let wxxx = derivative_norm(wtilde, 3)?;
        let v1 = 0.5 * a * nh * nh;
        let v2 = 0.5 * b * nt * nt;
        let v3 = 0.5 * b * wt * wt;
        out.times.push(s.t);
        out.v1.push(v1);
        out.v2.push(v2);
        out.v3.push(v3);
        out.v3_tilde.push(0.5 * b * wxxx * wxxx);
        out.v.push(v1 + v2 + v3);
        out.norm_what.push(nh);
        out.norm_wtilde.push(nt);
    }
    Ok(out)
}

/// Empirical constants `d1 <= (V2 + V3) / (V2 + V3~) <= d2` over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEquivalence {
    pub d1: f64,
    pub d2: f64,
    /// steps with a nonzero denominator
    pub samples: usize,
}

/// Ratios for the last field of `traj` (the `wtilde` component). Steps where
/// the field has underflowed to zero are skipped.
pub fn norm_equivalence_report(traj: &Trajectory) -> Result<NormEquivalence> {
    let first = traj
        .snapshots
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
    let rhs = TargetRhs::new(first.fields[0].grid(), traj.lambda)?;
    let mut d1 = f64::INFINITY;
    let mut d2 = 0.0_f64;
    let mut samples = 0;
    for s in &traj.snapshots {
        let w = s.fields.last().expect("snapshots carry a field");
        let n0 = w.norm_l2().powi(2);
        let nt = l2_norm(w.grid(), &rhs.apply(w)).powi(2);
        let n3 = derivative_norm(w, 3)?.powi(2);
        let den = n0 + n3;
        if !(den > 0.0) {
            continue;
        }
        let r = (n0 + nt) / den;
        d1 = d1.min(r);
        d2 = d2.max(r);
        samples += 1;
    }
    if samples == 0 {
        return Err(Error::UndefinedRatio(
            "wtilde vanishes along the whole trajectory".into(),
        ));
    }
    if !(d1 > 0.0 && d2.is_finite()) {
        return Err(Error::UndefinedRatio(format!(
            "norm ratios out of range: d1 = {d1}, d2 = {d2}"
        )));
    }
    Ok(NormEquivalence { d1, d2, samples })
}

/// `max_i |p_1(x_i) - \int_{x_i}^L k(x_i, y) p_1(y) dy|`.
pub fn gain_bound_d(p1: &InjectionGain, k: &GainKernel) -> Result<f64> {
    let f = Field::new(p1.grid.clone(), p1.samples.clone())?;
    Ok(apply_volterra(k, &f)?.max_abs())
}

/// One step of the trace inequality
/// `|w_xx(L)|^2 <= (1/L + L)||w_xx||^2 + (2 lambda + 1/L)||w_x||^2 + (1/L)||w_t||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceBoundStep {
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub norm_w: f64,
    pub norm_wx: f64,
    pub norm_wxx: f64,
    pub norm_wxxx: f64,
    pub norm_wt: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceBoundReport {
    pub steps: Vec<TraceBoundStep>,
}

impl TraceBoundReport {
    pub fn slack_min(&self) -> f64 {
        self.steps.iter().map(|s| s.slack).fold(f64::INFINITY, f64::min)
    }

    /// Smallest `slack / RHS` over steps with `RHS > 0`.
    pub fn relative_slack_min(&self) -> f64 {
        self.steps
            .iter()
            .filter(|s| s.rhs > 0.0)
            .map(|s| s.slack / s.rhs)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates the trace inequality on the last field of every snapshot.
pub fn trace_bound_check(traj: &Trajectory) -> Result<TraceBoundReport> {
    let Some(first) = traj.snapshots.first() else {
        return Ok(TraceBoundReport::default());
    };
    let grid = first.fields[0].grid().clone();
    let rhs_op = TargetRhs::new(&grid, traj.lambda)?;
    let l = grid.length();
    let lambda = traj.lambda;
    let mut steps = Vec::with_capacity(traj.snapshots.len());
    for s in &traj.snapshots {
        let w = s.fields.last().expect("snapshots carry a field");
        let trace = trace_second_derivative(w);
        let norm_w = w.norm_l2();
        let norm_wx = derivative_norm(w, 1)?;
        let norm_wxx = derivative_norm(w, 2)?;
        let norm_wxxx = derivative_norm(w, 3)?;
        let norm_wt = l2_norm(&grid, &rhs_op.apply(w));
        let lhs = trace * trace;
        let rhs = (1.0 / l + l) * norm_wxx * norm_wxx
            + (2.0 * lambda + 1.0 / l) * norm_wx * norm_wx
            + norm_wt * norm_wt / l;
        steps.push(TraceBoundStep {
            t: s.t,
            lhs,
            rhs,
            slack: rhs - lhs,
            norm_w,
            norm_wx,
            norm_wxx,
            norm_wxxx,
            norm_wt,
        });
    }
    Ok(TraceBoundReport { steps })
}

/// Constants `a, b` with `|w_xx(L)|^2 <= a||w||^2 + b||w_t||^2`, built from
/// the trace inequality and measured norm ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConstants {
    pub a: f64,
    pub b: f64,
    /// `max ||w_xx||^2 / (||w||^2 + ||w_xxx||^2)` over the run
    pub c_xx: f64,
    /// `max ||w_x||^2 / (||w||^2 + ||w_xxx||^2)` over the run
    pub c_x: f64,
    pub d1: f64,
}

/// `a = [(1/L + L) c_xx + (2 lambda + 1/L) c_x] / d1` and `b = a + 1/L`:
/// bound `||w_xx||^2` and `||w_x||^2` by `||w||^2 + ||w_xxx||^2`, which is at
/// most `(||w||^2 + ||w_t||^2) / d1`.
pub fn trace_constants(report: &TraceBoundReport, equivalence: &NormEquivalence, length: f64, lambda: f64) -> Result<TraceConstants> {
    let mut c_xx = 0.0_f64;
    let mut c_x = 0.0_f64;
    for s in &report.steps {
        let den = s.norm_w.powi(2) + s.norm_wxxx.powi(2);
        if den > 0.0 {
            c_xx = c_xx.max(s.norm_wxx.powi(2) / den);
            c_x = c_x.max(s.norm_wx.powi(2) / den);
        }
    }
    if !(equivalence.d1 > 0.0) {
        return Err(Error::UndefinedRatio("d1 must be positive".into()));
    }
    let a = ((1.0 / length + length) * c_xx + (2.0 * lambda + 1.0 / length) * c_x) / equivalence.d1;
    Ok(TraceConstants {
        a,
        b: a + 1.0 / length,
        c_xx,
        c_x,
        d1: equivalence.d1,
    })
}

/// `A = max(1, D^2 / eps)`, `B = max(1, max(a, b) A^2 / eps)`.
pub fn choose_weights(d: f64, a: f64, b: f64, lambda: f64, epsilon: f64) -> Result<(f64, f64)> {
    if !(epsilon > 0.0 && epsilon < lambda) {
        // lambda = 0 leaves no room for a margin; the floor weights still apply
        if !(lambda == 0.0 && epsilon > 0.0) {
            return invalid(format!(
                "epsilon must lie in (0, lambda), got epsilon = {epsilon}, lambda = {lambda}"
            ));
        }
    }
    if !(d >= 0.0 && a >= 0.0 && b >= 0.0) {
        return invalid(format!("D, a, b must be non-negative, got {d}, {a}, {b}"));
    }
    let weight_a = (d * d / epsilon).max(1.0);
    let weight_b = (a.max(b) * weight_a * weight_a / epsilon).max(1.0);
    Ok((weight_a, weight_b))
}

/// Samples below this fraction of the largest norm are treated as underflow
/// and end the fit window.
pub const UNDERFLOW_FRACTION: f64 = 1e-200;

/// Least-squares slope of `-log(norm)` against `t` after dropping the first
/// `drop_fraction` of the samples.
pub fn fit_decay_rate_with(times: &[f64], norms: &[f64], drop_fraction: f64) -> Result<f64> {
    if times.len() != norms.len() {
        return invalid(format!(
            "{} times but {} norms",
            times.len(),
            norms.len()
        ));
    }
    if !(0.0..1.0).contains(&drop_fraction) {
        return invalid("drop fraction must lie in [0, 1)");
    }
    let start = (times.len() as f64 * drop_fraction).floor() as usize;
    let peak = norms.iter().fold(0.0_f64, |m, v| m.max(*v));
    let floor = peak * UNDERFLOW_FRACTION;
    let mut pts = Vec::new();
    for (t, v) in times[start..].iter().zip(&norms[start..]) {
        if !v.is_finite() || *v < 0.0 {
            return invalid(format!("norm {v} at t = {t} is not a valid norm"));
        }
        if *v <= floor {
            break;
        }
        pts.push((*t, -v.ln()));
    }
    if pts.len() < 2 {
        return invalid("fewer than two positive norms in the fit window");
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx == 0.0 {
        return invalid("fit window spans zero time");
    }
    Ok(sxy / sxx)
}

/// [`fit_decay_rate_with`] dropping the first 10% of samples.
pub fn fit_decay_rate(times: &[f64], norms: &[f64]) -> Result<f64> {
    fit_decay_rate_with(times, norms, 0.1)
}

/// Largest relative growth per unit time of `values(t) e^{rate t}` between
/// consecutive samples; non-positive means monotone decay at `rate` or faster.
/// Samples at or below the underflow floor are ignored.
pub fn weighted_growth(times: &[f64], values: &[f64], rate: f64) -> f64 {
    let peak = values.iter().fold(0.0_f64, |m, v| m.max(*v));
    let floor = peak * UNDERFLOW_FRACTION;
    let mut worst = f64::NEG_INFINITY;
    for k in 1..values.len().min(times.len()) {
        if values[k - 1] <= floor || values[k] <= floor {
            break;
        }
        let dt = times[k] - times[k - 1];
        // ratio of weighted values, computed in log space to avoid overflow
        let log_ratio = (values[k] / values[k - 1]).ln() + rate * dt;
        worst = worst.max(log_ratio.exp_m1() / dt);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
    pub max_real: f64,
}

impl SpectrumReport {
    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }
}

/// Dense eigenvalues of the discrete operator.
pub fn spectrum(op: &DiscreteOperator) -> Result<SpectrumReport> {
    spectrum_of(op.matrix())
}

pub fn spectrum_of(matrix: faer::MatRef<'_, f64>) -> Result<SpectrumReport> {
    let eig = matrix
        .eigenvalues()
        .map_err(|e| Error::NumericFailure(format!("eigensolver failed: {e:?}")))?;
    if eig.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::NumericFailure("eigensolver returned non-finite values".into()));
    }
    let real: Vec<f64> = eig.iter().map(|z| z.re).collect();
    let imag: Vec<f64> = eig.iter().map(|z| z.im).collect();
    let max_real = real.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SpectrumReport {
        real,
        imag,
        max_real,
    })
}

/// Largest distance in a greedy one-to-one matching of two eigenvalue
/// multisets, each distance divided by `max(1, |z|)`. `None` if the counts
/// differ.
pub fn multiset_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let key = |z: &(f64, f64)| (z.0, z.1);
    let mut left: Vec<(f64, f64)> = a.iter().map(key).collect();
    let mut right: Vec<(f64, f64)> = b.iter().map(key).collect();
    let by_modulus = |x: &(f64, f64), y: &(f64, f64)| {
        x.0.hypot(x.1)
            .partial_cmp(&y.0.hypot(y.1))
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    left.sort_by(by_modulus);
    right.sort_by(by_modulus);
    let mut used = vec![false; right.len()];
    let mut worst = 0.0_f64;
    for z in &left {
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, w) in right.iter().enumerate() {
            if used[j] {
                continue;
            }
            let d = (z.0 - w.0).hypot(z.1 - w.1) / z.0.hypot(z.1).max(1.0);
            if d < best.0 {
                best = (d, j);
            }
        }
        used[best.1] = true;
        worst = worst.max(best.0);
    }
    Some(worst)
}

impl SpectrumReport {
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.real.iter().copied().zip(self.imag.iter().copied()).collect()
    }

    /// Every eigenvalue moved by `-shift` along the real axis.
    pub fn shifted(&self, shift: f64) -> SpectrumReport {
        SpectrumReport {
            real: self.real.iter().map(|r| r - shift).collect(),
            imag: self.imag.clone(),
            max_real: self.max_real - shift,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_operator, StateSnapshot, SystemVariant, Traces, VariantTag};

    fn grid() -> IntervalGrid {
        IntervalGrid::new(1.0, 41).unwrap()
    }

    fn two_field_traj(what: Field, wtilde: Field) -> Trajectory {
        Trajectory {
            tag: VariantTag::CoupledTarget,
            dt: 0.1,
            lambda: 1.0,
            snapshots: vec![StateSnapshot {
                t: 0.0,
                fields: vec![what, wtilde],
                traces: Traces {
                    y: 0.0,
                    second: Some(0.0),
                    left_slope: 0.0,
                },
                input: 0.0,
            }],
        }
    }

    #[test]
    fn v1_of_unit_field() {
        let g = grid();
        let traj = two_field_traj(Field::from_fn(&g, |_| 1.0), Field::zeros(&g));
        let s = lyapunov_series(&traj, 2.0, 1.0).unwrap();
        assert!((s.v1[0] - 1.0).abs() < 1e-14);
        assert_eq!(s.v2[0], 0.0);
        assert_eq!(s.v[0], s.v1[0]);
    }

    #[test]
    fn lyapunov_needs_two_fields_and_positive_weights() {
        let g = grid();
        let mut traj = two_field_traj(Field::zeros(&g), Field::zeros(&g));
        assert!(lyapunov_series(&traj, 0.0, 1.0).is_err());
        traj.snapshots[0].fields.pop();
        assert!(lyapunov_series(&traj, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_field_ratio_is_undefined() {
        let g = grid();
        let traj = two_field_traj(Field::zeros(&g), Field::zeros(&g));
        assert!(matches!(
            norm_equivalence_report(&traj),
            Err(Error::UndefinedRatio(_))
        ));
    }

    #[test]
    fn ratios_are_scale_free() {
        let g = grid();
        let bump = |c: f64| Field::from_fn(&g, move |x| c * x * x * (1.0 - x).powi(3));
        let r1 = norm_equivalence_report(&two_field_traj(Field::zeros(&g), bump(1.0))).unwrap();
        let r10 = norm_equivalence_report(&two_field_traj(Field::zeros(&g), bump(10.0))).unwrap();
        assert!((r1.d1 - r10.d1).abs() <= 1e-12 * r1.d1);
        assert!(r1.d1 > 0.0 && r1.d1 <= r1.d2);
    }

    #[test]
    fn zero_field_trace_slack() {
        let g = grid();
        let traj = two_field_traj(Field::zeros(&g), Field::zeros(&g));
        let r = trace_bound_check(&traj).unwrap();
        assert_eq!(r.steps[0].lhs, 0.0);
        assert_eq!(r.steps[0].slack, 0.0);
    }

    #[test]
    fn weights_from_formulas() {
        assert_eq!(choose_weights(1.0, 1.0, 1.0, 1.0, 0.5).unwrap(), (2.0, 8.0));
        assert_eq!(choose_weights(0.0, 0.2, 0.3, 1.0, 0.5).unwrap(), (1.0, 1.0));
        assert_eq!(choose_weights(0.0, 2.0, 3.0, 1.0, 0.5).unwrap(), (1.0, 6.0));
        assert!(choose_weights(1.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(choose_weights(1.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn fit_exact_exponential_and_constant() {
        let t: Vec<f64> = (0..200).map(|k| k as f64 * 0.05).collect();
        let e: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp()).collect();
        assert!((fit_decay_rate(&t, &e).unwrap() - 2.0).abs() < 1e-10);
        let c = vec![3.0; t.len()];
        assert!(fit_decay_rate(&t, &c).unwrap().abs() < 1e-12);
        let scaled: Vec<f64> = e.iter().map(|v| v * 1e5).collect();
        assert!((fit_decay_rate(&t, &scaled).unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn fit_rejects_bad_norms() {
        let t = [0.0, 1.0, 2.0, 3.0];
        assert!(fit_decay_rate(&t, &[1.0, -1.0, 1.0, 1.0]).is_err());
        assert!(fit_decay_rate(&t, &[0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(fit_decay_rate(&t, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn target_shift_moves_spectrum() {
        let g = grid();
        let s0 = spectrum(&build_operator(&g, &SystemVariant::target(0.0)).unwrap()).unwrap();
        let s1 = spectrum(&build_operator(&g, &SystemVariant::target(1.0)).unwrap()).unwrap();
        assert_eq!(s0.len(), 39);
        let d = multiset_distance(&s1.pairs(), &s0.shifted(1.0).pairs()).unwrap();
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn multiset_distance_pairs_up() {
        let a = [(1.0, 0.0), (0.0, 2.0), (0.0, -2.0)];
        let b = [(0.0, -2.0), (1.0, 0.0), (0.0, 2.0)];
        assert_eq!(multiset_distance(&a, &b), Some(0.0));
        assert_eq!(multiset_distance(&a, &b[..2]), None);
    }

    #[test]
    fn weighted_growth_of_exponential() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let v: Vec<f64> = t.iter().map(|t| (-3.0 * t).exp()).collect();
        assert!(weighted_growth(&t, &v, 3.0).abs() < 1e-12);
        assert!(weighted_growth(&t, &v, 2.0) < 0.0);
    }
}
