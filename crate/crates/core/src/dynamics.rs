//! Semi-discrete linear KdV systems and their time integration.
//!
//! Every variant shares the interior operator `A0 = -D1 - D3` on the nodes
//! `x_1 .. x_{n-2}`. `u(L) = 0` removes the last node, `u_x(L) = 0` closes the
//! third-derivative stencil next to `x = L` through a fourth-order ghost
//! relation, and the left Dirichlet value enters through the forcing column
//! `b`. The measured trace `u_xx(L)` is the row `c` applied to the interior
//! unknowns.
//!
//! Time stepping uses TR-BDF2, a trapezoid stage followed by a BDF2 stage that
//! share one step matrix. It is second order and L-stable, so the
//! high-wavenumber modes of the discrete third derivative are damped instead of
//! ringing as they do under Crank-Nicolson at `dt = h`.

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{invalid, Error, Result};
use crate::kernels::{FeedbackGainRow, GainKernel, InjectionGain};
use crate::mesh::{fd_weights, IntervalGrid};
use crate::transforms::{apply_volterra, feedback_weights, Field};

pub const MIN_DYNAMICS_NODES: usize = 21;

/// Which system a [`SystemVariant`] discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantTag {
    /// `u_t + u_x + u_xxx = 0`, `u(0) = kappa`; kappa from a state feedback
    /// row or supplied as an input signal.
    Plant,
    /// Observer with injection `p_1 (y - yhat)`; `y` is an input signal and
    /// the boundary value is `kappa = \int k(0, y) uhat`.
    Observer,
    /// Estimation error `u_t + u_x + u_xxx - p_1 u_xx(L) = 0`, `u(0) = 0`.
    Error,
    /// `w_t + w_x + w_xxx + lambda w = 0` with homogeneous boundary data.
    Target,
    /// Transformed closed loop in `(what, wtilde)`: the `what` target equation
    /// forced by `-q(x) wtilde_xx(L)` with `q = p_1 - \int_x^L k p_1`, and a
    /// `wtilde` target equation with `wtilde(0) = 0`.
    CoupledTarget,
    /// `v = u_t` of the plant: same operator, `v(0)` is the input signal.
    TimeDerivative,
    /// Plant and observer in `(u, uhat)` with `kappa = \int k(0, y) uhat`.
    ClosedLoop,
}

impl VariantTag {
    pub fn name(self) -> &'static str {
        match self {
            VariantTag::Plant => "plant",
            VariantTag::Observer => "observer",
            VariantTag::Error => "error",
            VariantTag::Target => "target",
            VariantTag::CoupledTarget => "coupled_target",
            VariantTag::TimeDerivative => "time_derivative",
            VariantTag::ClosedLoop => "closed_loop",
        }
    }

    fn blocks(self) -> usize {
        match self {
            VariantTag::CoupledTarget | VariantTag::ClosedLoop => 2,
            _ => 1,
        }
    }
}

/// A system to discretize, with the gains it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemVariant {
    pub tag: VariantTag,
    pub lambda: f64,
    pub injection: Option<InjectionGain>,
    pub feedback: Option<FeedbackGainRow>,
    /// `q(x_i)` for the coupled target
    pub coupling: Option<Vec<f64>>,
    /// Closed loop only: hold `kappa = 0` while the observer still runs.
    pub open_loop: bool,
}

impl SystemVariant {
    fn bare(tag: VariantTag) -> Self {
        Self {
            tag,
            lambda: 0.0,
            injection: None,
            feedback: None,
            coupling: None,
            open_loop: false,
        }
    }

    /// Plant with `kappa = \int k(0, y) u(y) dy` when `feedback` is given,
    /// otherwise with `kappa` as an input signal.
    pub fn plant(feedback: Option<FeedbackGainRow>) -> Self {
        Self {
            feedback,
            ..Self::bare(VariantTag::Plant)
        }
    }

    pub fn observer(injection: InjectionGain, feedback: FeedbackGainRow) -> Self {
        Self {
            injection: Some(injection),
            feedback: Some(feedback),
            ..Self::bare(VariantTag::Observer)
        }
    }

    pub fn error(injection: InjectionGain) -> Self {
        Self {
            injection: Some(injection),
            ..Self::bare(VariantTag::Error)
        }
    }

    pub fn target(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::bare(VariantTag::Target)
        }
    }

    /// Computes `q = p_1 - \int_x^L k(x, y) p_1(y) dy` from the gain kernel.
    pub fn coupled_target(lambda: f64, k: &GainKernel, injection: &InjectionGain) -> Result<Self> {
        let p1 = Field::new(injection.grid.clone(), injection.samples.clone())?;
        let q = apply_volterra(k, &p1)?.into_samples();
        Ok(Self {
            lambda,
            injection: Some(injection.clone()),
            coupling: Some(q),
            ..Self::bare(VariantTag::CoupledTarget)
        })
    }

    pub fn time_derivative() -> Self {
        Self::bare(VariantTag::TimeDerivative)
    }

    pub fn closed_loop(feedback: FeedbackGainRow, injection: InjectionGain, open_loop: bool) -> Self {
        Self {
            feedback: Some(feedback),
            injection: Some(injection),
            open_loop,
            ..Self::bare(VariantTag::ClosedLoop)
        }
    }

    fn validate(&self, grid: &IntervalGrid) -> Result<()> {
        let need_injection = matches!(
            self.tag,
            VariantTag::Observer | VariantTag::Error | VariantTag::ClosedLoop | VariantTag::CoupledTarget
        );
        let need_feedback = matches!(self.tag, VariantTag::Observer | VariantTag::ClosedLoop);
        if need_injection && self.injection.is_none() {
            return invalid(format!("{} variant needs an injection gain", self.tag.name()));
        }
        if need_feedback && self.feedback.is_none() {
            return invalid(format!("{} variant needs a feedback row", self.tag.name()));
        }
        if self.tag == VariantTag::CoupledTarget && self.coupling.is_none() {
            return invalid("coupled_target variant needs the coupling profile q");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return invalid(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if let Some(p1) = &self.injection {
            if !p1.grid.same_as(grid) {
                return invalid("injection gain lives on a different grid");
            }
        }
        if let Some(row) = &self.feedback {
            if !row.grid.same_as(grid) {
                return invalid("feedback row lives on a different grid");
            }
        }
        if let Some(q) = &self.coupling {
            grid.check_len(q)?;
        }
        Ok(())
    }
}

/// Where the `x = 0` value of each block comes from.
#[derive(Debug, Clone, PartialEq)]
enum LeftValue {
    Zero,
    Input,
    /// linear functional of the stacked state
    Functional(Vec<f64>),
}

/// The discrete plant pieces every variant is assembled from.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantParts {
    /// `-D1 - D3` on interior nodes, right boundary conditions eliminated
    pub a0: Mat<f64>,
    /// coefficient of the left boundary value in each interior equation
    pub b: Vec<f64>,
    /// `u_xx(L)` as a row over interior nodes
    pub c: Vec<f64>,
}

/// Builds `A0`, `b` and `c` for `grid`.
pub fn plant_parts(grid: &IntervalGrid) -> Result<PlantParts> {
    let n = grid.len();
    if n < MIN_DYNAMICS_NODES {
        return invalid(format!(
            "dynamics need at least {MIN_DYNAMICS_NODES} nodes, got {n}"
        ));
    }
    let h = grid.spacing();
    let m = n - 2;
    let mut a0 = Mat::<f64>::zeros(m, m);
    let mut b = vec![0.0; m];

    // ghost u_n from a fourth-order u_x(L) = 0 on offsets -3..1 around n-1
    let gw = fd_weights(&[-3, -2, -1, 0, 1], 1);
    let ghost: Vec<(usize, f64)> = (0..4).map(|k| (n - 4 + k, -gw[k] / gw[4])).collect();

    let mut put = |row: usize, node: usize, v: f64, a0: &mut Mat<f64>| {
        let mut direct = |node: usize, v: f64| {
            if node == 0 {
                b[row] += v;
            } else if node < n - 1 {
                a0[(row, node - 1)] += v;
            }
        };
        if node == n {
            for &(g, c) in &ghost {
                direct(g, v * c);
            }
        } else {
            direct(node, v);
        }
    };

    let d3_centered = fd_weights(&[-2, -1, 0, 1, 2], 3);
    let d3_left = fd_weights(&[-1, 0, 1, 2, 3], 3);
    for i in 1..n - 1 {
        let row = i - 1;
        put(row, i + 1, -0.5 / h, &mut a0);
        put(row, i - 1, 0.5 / h, &mut a0);
        let (offsets, w): (Vec<isize>, &[f64]) = if i >= 2 {
            ((-2..=2).collect(), &d3_centered)
        } else {
            ((-1..=3).collect(), &d3_left)
        };
        for (o, c) in offsets.iter().zip(w) {
            put(row, (i as isize + o) as usize, -c / h.powi(3), &mut a0);
        }
    }

    let mut c = vec![0.0; m];
    let tw = trace_weights(h);
    for (k, w) in tw.iter().enumerate().take(3) {
        c[n - 4 + k - 1] += w;
    }
    Ok(PlantParts { a0, b, c })
}

/// Second-order one-sided weights for `f''(L)` on the last four nodes.
fn trace_weights(h: f64) -> Vec<f64> {
    fd_weights(&[-3, -2, -1, 0], 2)
        .into_iter()
        .map(|w| w / (h * h))
        .collect()
}

/// One-sided second-order estimate of `f''(L)`.
pub fn trace_second_derivative(f: &Field) -> f64 {
    let s = f.samples();
    let n = s.len();
    trace_weights(f.grid().spacing())
        .iter()
        .zip(&s[n - 4..])
        .map(|(w, v)| w * v)
        .sum()
}

/// One-sided second-order estimate of `f'(0)`.
pub fn left_slope(f: &Field) -> f64 {
    let s = f.samples();
    (-1.5 * s[0] + 2.0 * s[1] - 0.5 * s[2]) / f.grid().spacing()
}

/// Linear system `s' = M s + e * input(t)` on stacked interior unknowns.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    grid: IntervalGrid,
    tag: VariantTag,
    matrix: Mat<f64>,
    input: Option<Vec<f64>>,
    left: Vec<LeftValue>,
}

impl DiscreteOperator {
    pub fn grid(&self) -> &IntervalGrid {
        &self.grid
    }

    pub fn tag(&self) -> VariantTag {
        self.tag
    }

    pub fn matrix(&self) -> MatRef<'_, f64> {
        self.matrix.as_ref()
    }

    /// Column multiplying the external input signal, if the variant has one.
    pub fn input_column(&self) -> Option<&[f64]> {
        self.input.as_deref()
    }

    pub fn blocks(&self) -> usize {
        self.left.len()
    }

    /// Interior unknowns per block.
    pub fn block_size(&self) -> usize {
        self.grid.len() - 2
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `M s + e * input`.
    pub fn apply(&self, state: &[f64], input: f64) -> Vec<f64> {
        let mut out = matvec(&self.matrix, state);
        if let Some(e) = &self.input {
            for (o, c) in out.iter_mut().zip(e) {
                *o += c * input;
            }
        }
        out
    }

    /// Stacked interior unknowns of full-grid fields, one per block.
    pub fn interior_state(&self, fields: &[Field]) -> Result<Vec<f64>> {
        if fields.len() != self.blocks() {
            return invalid(format!(
                "{} variant expects {} fields, got {}",
                self.tag.name(),
                self.blocks(),
                fields.len()
            ));
        }
        let mut s = Vec::with_capacity(self.dim());
        for f in fields {
            if !f.grid().same_as(&self.grid) {
                return invalid("initial field lives on a different grid");
            }
            let v = f.samples();
            s.extend_from_slice(&v[1..v.len() - 1]);
        }
        Ok(s)
    }

    /// Full-grid fields from stacked interior unknowns, filling in the
    /// boundary nodes.
    pub fn fields(&self, state: &[f64], input: f64) -> Vec<Field> {
        let m = self.block_size();
        self.left
            .iter()
            .enumerate()
            .map(|(blk, left)| {
                let left_value = match left {
                    LeftValue::Zero => 0.0,
                    LeftValue::Input => input,
                    LeftValue::Functional(g) => dot(g, state),
                };
                let mut v = Vec::with_capacity(m + 2);
                v.push(left_value);
                v.extend_from_slice(&state[blk * m..(blk + 1) * m]);
                v.push(0.0);
                Field::new(self.grid.clone(), v).expect("block size matches grid")
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &Mat<f64>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    for j in 0..m.ncols() {
        let vj = v[j];
        if vj == 0.0 {
            continue;
        }
        let col = m.col(j);
        for (o, a) in out.iter_mut().zip(col.iter()) {
            *o += a * vj;
        }
    }
    out
}

/// Adds `scale * u v^T` into the `(r0, c0)` block of `m`.
fn add_outer(m: &mut Mat<f64>, r0: usize, c0: usize, u: &[f64], v: &[f64], scale: f64) {
    for (i, ui) in u.iter().enumerate() {
        if *ui == 0.0 {
            continue;
        }
        for (j, vj) in v.iter().enumerate() {
            m[(r0 + i, c0 + j)] += scale * ui * vj;
        }
    }
}

fn add_block(m: &mut Mat<f64>, r0: usize, c0: usize, a: &Mat<f64>) {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m[(r0 + i, c0 + j)] += a[(i, j)];
        }
    }
}

/// Assembles the discrete operator of `variant` on `grid`.
pub fn build_operator(grid: &IntervalGrid, variant: &SystemVariant) -> Result<DiscreteOperator> {
    variant.validate(grid)?;
    let PlantParts { a0, b, c } = plant_parts(grid)?;
    let m = a0.nrows();
    let interior = |full: &[f64]| full[1..full.len() - 1].to_vec();
    let p1 = variant.injection.as_ref().map(|g| interior(&g.samples));
    // kappa as a functional of interior samples; the end weights multiply
    // boundary values that are zero (k(0, L) = 0) or equal kappa itself
    // (k(0, 0) = 0), so dropping them is exact
    let g = variant.feedback.as_ref().map(|row| interior(&feedback_weights(row)));
    let blocks = variant.tag.blocks();
    let mut matrix = Mat::<f64>::zeros(blocks * m, blocks * m);
    let mut input = None;
    let mut left = Vec::with_capacity(blocks);

    match variant.tag {
        VariantTag::Plant | VariantTag::TimeDerivative => {
            add_block(&mut matrix, 0, 0, &a0);
            match (&g, variant.tag) {
                (Some(g), VariantTag::Plant) => {
                    add_outer(&mut matrix, 0, 0, &b, g, 1.0);
                    left.push(LeftValue::Functional(g.clone()));
                }
                _ => {
                    input = Some(b.clone());
                    left.push(LeftValue::Input);
                }
            }
        }
        VariantTag::Observer => {
            let (p1, g) = (p1.as_ref().unwrap(), g.as_ref().unwrap());
            add_block(&mut matrix, 0, 0, &a0);
            add_outer(&mut matrix, 0, 0, &b, g, 1.0);
            add_outer(&mut matrix, 0, 0, p1, &c, 1.0);
            input = Some(p1.iter().map(|v| -v).collect());
            left.push(LeftValue::Functional(g.clone()));
        }
        VariantTag::Error => {
            add_block(&mut matrix, 0, 0, &a0);
            add_outer(&mut matrix, 0, 0, p1.as_ref().unwrap(), &c, 1.0);
            left.push(LeftValue::Zero);
        }
        VariantTag::Target => {
            add_block(&mut matrix, 0, 0, &a0);
            left.push(LeftValue::Zero);
        }
        VariantTag::CoupledTarget => {
            let q = interior(variant.coupling.as_ref().unwrap());
            add_block(&mut matrix, 0, 0, &a0);
            add_block(&mut matrix, m, m, &a0);
            add_outer(&mut matrix, 0, m, &q, &c, -1.0);
            left.push(LeftValue::Zero);
            left.push(LeftValue::Zero);
        }
        VariantTag::ClosedLoop => {
            let (p1, g) = (p1.as_ref().unwrap(), g.as_ref().unwrap());
            add_block(&mut matrix, 0, 0, &a0);
            add_block(&mut matrix, m, m, &a0);
            add_outer(&mut matrix, m, 0, p1, &c, -1.0);
            add_outer(&mut matrix, m, m, p1, &c, 1.0);
            if variant.open_loop {
                left.push(LeftValue::Zero);
                left.push(LeftValue::Zero);
            } else {
                let mut g_full = vec![0.0; 2 * m];
                g_full[m..].copy_from_slice(g);
                add_outer(&mut matrix, 0, m, &b, g, 1.0);
                add_outer(&mut matrix, m, m, &b, g, 1.0);
                left.push(LeftValue::Functional(g_full.clone()));
                left.push(LeftValue::Functional(g_full));
            }
        }
    }
    if matches!(variant.tag, VariantTag::Target | VariantTag::CoupledTarget) {
        for d in 0..blocks * m {
            matrix[(d, d)] -= variant.lambda;
        }
    }
    Ok(DiscreteOperator {
        grid: grid.clone(),
        tag: variant.tag,
        matrix,
        input,
        left,
    })
}

const GAMMA: f64 = 2.0 - std::f64::consts::SQRT_2;

/// Factored TR-BDF2 step for a fixed operator and step size.
pub struct Stepper<'a> {
    op: &'a DiscreteOperator,
    dt: f64,
    lu: faer::linalg::solvers::PartialPivLu<f64>,
    /// `I + (gamma dt / 2) M`
    explicit: Mat<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(op: &'a DiscreteOperator, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return invalid(format!("time step must be positive, got {dt}"));
        }
        let d = op.dim();
        let half = 0.5 * GAMMA * dt;
        let implicit = Mat::<f64>::from_fn(d, d, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - half * op.matrix[(i, j)]
        });
        let explicit = Mat::<f64>::from_fn(d, d, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) + half * op.matrix[(i, j)]
        });
        let lu = implicit.partial_piv_lu();
        let u = lu.U();
        let scale = (0..d).fold(0.0_f64, |s, i| s.max(u[(i, i)].abs()));
        let smallest = (0..d).fold(f64::INFINITY, |s, i| s.min(u[(i, i)].abs()));
        if !(smallest.is_finite() && smallest > 1e-14 * scale) {
            return Err(Error::StepFailure(format!(
                "step matrix is singular for dt = {dt} on {} nodes",
                op.grid.len()
            )));
        }
        Ok(Self {
            op,
            dt,
            lu,
            explicit,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn solve(&self, rhs: Vec<f64>) -> Result<Vec<f64>> {
        let mut col = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.lu.solve_in_place(col.as_mut());
        let out: Vec<f64> = (0..rhs.len()).map(|i| col[(i, 0)]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepFailure("non-finite state after solve".into()));
        }
        Ok(out)
    }

    /// Advances from `t` to `t + dt`; `input` gives the external signal.
    pub fn advance(&self, state: &[f64], t: f64, input: &dyn Fn(f64) -> f64) -> Result<Vec<f64>> {
        let dt = self.dt;
        let mut rhs = matvec(&self.explicit, state);
        let e = self.op.input.as_deref();
        if let Some(e) = e {
            let forcing = 0.5 * GAMMA * dt * (input(t) + input(t + GAMMA * dt));
            for (r, c) in rhs.iter_mut().zip(e) {
                *r += c * forcing;
            }
        }
        let stage = self.solve(rhs)?;
        let c1 = 1.0 / (GAMMA * (2.0 - GAMMA));
        let c2 = (1.0 - GAMMA).powi(2) / (GAMMA * (2.0 - GAMMA));
        let mut rhs: Vec<f64> = stage
            .iter()
            .zip(state)
            .map(|(g, s)| c1 * g - c2 * s)
            .collect();
        if let Some(e) = e {
            let forcing = (1.0 - GAMMA) / (2.0 - GAMMA) * dt * input(t + dt);
            for (r, c) in rhs.iter_mut().zip(e) {
                *r += c * forcing;
            }
        }
        let mut next = self.solve(rhs)?;
        // decayed runs reach the subnormal range, where arithmetic is slow
        for v in next.iter_mut() {
            if v.abs() < f64::MIN_POSITIVE {
                *v = 0.0;
            }
        }
        Ok(next)
    }
}

/// Boundary traces recorded with every snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    /// `f_xx(L)` of the first field (the measurement `y` for the plant)
    pub y: f64,
    /// `f_xx(L)` of the second field, when there is one (`yhat` for the closed
    /// loop, `wtilde_xx(L)` for the coupled target)
    pub second: Option<f64>,
    /// `f_x(0)` of the first field
    pub left_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub t: f64,
    /// One field per block: `u`; `(u, uhat)` for the closed loop;
    /// `(what, wtilde)` for the coupled target.
    pub fields: Vec<Field>,
    pub traces: Traces,
    /// Boundary input in effect at `t` (`kappa`, or `y` for the observer).
    pub input: f64,
}

impl StateSnapshot {
    fn from_state(op: &DiscreteOperator, t: f64, state: &[f64], input: f64) -> Self {
        let fields = op.fields(state, input);
        let traces = Traces {
            y: trace_second_derivative(&fields[0]),
            second: fields.get(1).map(trace_second_derivative),
            left_slope: left_slope(&fields[0]),
        };
        let input = match op.left.first() {
            Some(LeftValue::Functional(_)) => fields[0].samples()[0],
            _ => input,
        };
        Self {
            t,
            fields,
            traces,
            input,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tag: VariantTag,
    pub dt: f64,
    pub lambda: f64,
    pub snapshots: Vec<StateSnapshot>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    /// `L^2` norms of field `block` over time.
    pub fn norms(&self, block: usize) -> Vec<f64> {
        self.snapshots
            .iter()
            .map(|s| s.fields[block].norm_l2())
            .collect()
    }
}

/// One TR-BDF2 step of `op` from `state` with the boundary input held at
/// `kappa`. [`simulate`] reuses a single factorization across steps instead.
pub fn step(op: &DiscreteOperator, state: &StateSnapshot, dt: f64, kappa: f64) -> Result<StateSnapshot> {
    let stepper = Stepper::new(op, dt)?;
    let s = op.interior_state(&state.fields)?;
    let next = stepper.advance(&s, state.t, &|_| kappa)?;
    Ok(StateSnapshot::from_state(op, state.t + dt, &next, kappa))
}

const COMPATIBILITY_TOL: f64 = 1e-8;

/// `|f(L)|` and `|f_x(L)| h` relative to `max |f|`. The slope is taken per
/// grid cell with a tenth-order one-sided stencil, so smooth compatible data
/// pass at any resolution while the check still sees a kink of one cell.
fn right_end_mismatch(f: &Field) -> f64 {
    let s = f.samples();
    let n = s.len();
    let scale = f.max_abs();
    if scale == 0.0 {
        return 0.0;
    }
    let offsets: Vec<isize> = (-10..=0).collect();
    let w = fd_weights(&offsets, 1);
    let step: f64 = w.iter().zip(&s[n - 11..]).map(|(c, v)| c * v).sum();
    s[n - 1].abs().max(step.abs()) / scale
}

/// The right-end conditions are checked; the left value is not, since it is
/// recomputed from the boundary law at every step.
fn check_initial(op: &DiscreteOperator, initial: &[Field]) -> Result<()> {
    if initial.len() != op.blocks() {
        return invalid(format!(
            "{} variant expects {} fields, got {}",
            op.tag.name(),
            op.blocks(),
            initial.len()
        ));
    }
    for (blk, f) in initial.iter().enumerate() {
        if !f.grid().same_as(&op.grid) {
            return invalid("initial field lives on a different grid");
        }
        let mismatch = right_end_mismatch(f);
        if mismatch > COMPATIBILITY_TOL {
            return invalid(format!(
                "initial field {blk} violates u(L) = u_x(L) = 0 (relative mismatch {mismatch:.2e})"
            ));
        }
    }
    Ok(())
}

/// Time span and step of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn from_config(config: &SimConfig) -> Self {
        Self {
            dt: config.dt,
            steps: config.steps(),
        }
    }
}

/// Integrates `op` from `initial` (one field per block) with an optional
/// external input signal.
pub fn simulate_operator(
    op: &DiscreteOperator,
    time: TimeGrid,
    initial: &[Field],
    input: Option<&dyn Fn(f64) -> f64>,
    lambda: f64,
) -> Result<Trajectory> {
    check_initial(op, initial)?;
    integrate(op, time, op.interior_state(initial)?, input, lambda)
}

fn integrate(
    op: &DiscreteOperator,
    time: TimeGrid,
    mut state: Vec<f64>,
    input: Option<&dyn Fn(f64) -> f64>,
    lambda: f64,
) -> Result<Trajectory> {
    let zero = |_: f64| 0.0;
    let input: &dyn Fn(f64) -> f64 = input.unwrap_or(&zero);
    let stepper = Stepper::new(op, time.dt)?;
    let mut snapshots = Vec::with_capacity(time.steps + 1);
    snapshots.push(StateSnapshot::from_state(op, 0.0, &state, input(0.0)));
    for k in 0..time.steps {
        let t = k as f64 * time.dt;
        state = stepper.advance(&state, t, input)?;
        let t1 = (k + 1) as f64 * time.dt;
        snapshots.push(StateSnapshot::from_state(op, t1, &state, input(t1)));
    }
    Ok(Trajectory {
        tag: op.tag,
        dt: time.dt,
        lambda,
        snapshots,
    })
}

/// Runs `variant` on the configured grid and horizon. For the closed loop the
/// plant is driven by `kappa = \int k(0, y) uhat` and the observer by
/// `p_1 (y - yhat)`, both implicit inside the step.
pub fn simulate(config: &SimConfig, variant: &SystemVariant, initial: &[Field]) -> Result<Trajectory> {
    let grid = config.grid()?;
    let op = build_operator(&grid, variant)?;
    simulate_operator(&op, TimeGrid::from_config(config), initial, None, variant.lambda)
}

/// Piecewise-linear signal through uniformly spaced samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSignal {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl SampledSignal {
    pub fn at(&self, t: f64) -> f64 {
        let n = self.values.len();
        if n == 0 {
            return 0.0;
        }
        let s = (t / self.dt).max(0.0);
        let k = (s.floor() as usize).min(n - 1);
        if k + 1 >= n {
            return self.values[n - 1];
        }
        let frac = s - k as f64;
        self.values[k] * (1.0 - frac) + self.values[k + 1] * frac
    }

    /// Second-order finite-difference derivative of the samples.
    pub fn derivative(&self) -> SampledSignal {
        let v = &self.values;
        let n = v.len();
        let dt = self.dt;
        let values = (0..n)
            .map(|k| match n {
                0 | 1 => 0.0,
                2 => (v[1] - v[0]) / dt,
                _ if k == 0 => (-1.5 * v[0] + 2.0 * v[1] - 0.5 * v[2]) / dt,
                _ if k == n - 1 => (1.5 * v[n - 1] - 2.0 * v[n - 2] + 0.5 * v[n - 3]) / dt,
                _ => (v[k + 1] - v[k - 1]) / (2.0 * dt),
            })
            .collect();
        SampledSignal { dt, values }
    }
}

/// Simulates `v = u_t` of the plant driven by the boundary signal `kappa`
/// (sampled at the step times): `v(0) = kappa'(t)` and `v(0, .)` is the
/// semi-discrete right-hand side at `u_0`, i.e. `-u_0''' - u_0'` with the
/// plant's own stencils and boundary closure.
pub fn simulate_time_derivative(config: &SimConfig, u0: &Field, kappa: &SampledSignal) -> Result<Trajectory> {
    let grid = config.grid()?;
    if grid.len() < 9 {
        return invalid("time-derivative run needs at least 9 nodes");
    }
    if (kappa.dt - config.dt).abs() > 1e-12 * config.dt {
        return invalid("kappa series must be sampled at the simulation step");
    }
    let op = build_operator(&grid, &SystemVariant::time_derivative())?;
    check_initial(&op, std::slice::from_ref(u0))?;
    let k0 = kappa.values.first().copied().unwrap_or(0.0);
    let s0 = op.interior_state(std::slice::from_ref(u0))?;
    // v(0) is the discrete u_t, consistent with the scheme by construction
    let v0 = op.apply(&s0, k0);
    let kdot = kappa.derivative();
    let input = |t: f64| kdot.at(t);
    integrate(&op, TimeGrid::from_config(config), v0, Some(&input), 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigBuilder;

    fn grid(n: usize) -> IntervalGrid {
        IntervalGrid::new(1.0, n).unwrap()
    }

    fn zero_gains(g: &IntervalGrid) -> (FeedbackGainRow, InjectionGain) {
        (
            FeedbackGainRow {
                grid: g.clone(),
                samples: vec![0.0; g.len()],
            },
            InjectionGain {
                grid: g.clone(),
                samples: vec![0.0; g.len()],
            },
        )
    }

    #[test]
    fn target_at_zero_matches_plant() {
        let g = grid(41);
        let t = build_operator(&g, &SystemVariant::target(0.0)).unwrap();
        let p = build_operator(&g, &SystemVariant::plant(None)).unwrap();
        assert_eq!(t.matrix(), p.matrix());
    }

    #[test]
    fn error_with_zero_injection_matches_plant() {
        let g = grid(41);
        let (_, p1) = zero_gains(&g);
        let e = build_operator(&g, &SystemVariant::error(p1)).unwrap();
        let p = build_operator(&g, &SystemVariant::plant(None)).unwrap();
        assert_eq!(e.matrix(), p.matrix());
    }

    #[test]
    fn target_shift_is_diagonal() {
        let g = grid(41);
        let a = build_operator(&g, &SystemVariant::target(0.0)).unwrap();
        let b = build_operator(&g, &SystemVariant::target(1.5)).unwrap();
        for i in 0..a.dim() {
            for j in 0..a.dim() {
                let d = a.matrix()[(i, j)] - b.matrix()[(i, j)];
                assert_eq!(d, if i == j { 1.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn trace_of_quadratic_and_line() {
        let g = grid(21);
        let sq = Field::from_fn(&g, |x| x * x);
        assert!((trace_second_derivative(&sq) - 2.0).abs() < 1e-8);
        let line = Field::from_fn(&g, |x| 3.0 * x - 1.0);
        assert!(trace_second_derivative(&line).abs() < 1e-9);
    }

    #[test]
    fn trace_row_matches_field_trace() {
        let g = grid(31);
        let parts = plant_parts(&g).unwrap();
        let f = Field::from_fn(&g, |x| (1.0 - x).powi(2) * (2.0 * x).sin());
        let s = &f.samples()[1..30];
        assert!((dot(&parts.c, s) - trace_second_derivative(&f)).abs() < 1e-9);
    }

    #[test]
    fn zero_state_stays_zero() {
        let g = grid(31);
        let op = build_operator(&g, &SystemVariant::target(1.0)).unwrap();
        let z = StateSnapshot::from_state(&op, 0.0, &vec![0.0; op.dim()], 0.0);
        let next = step(&op, &z, 0.01, 0.0).unwrap();
        assert!(next.fields[0].samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn target_step_keeps_boundary_rows() {
        let g = grid(31);
        let op = build_operator(&g, &SystemVariant::target(1.0)).unwrap();
        let f = Field::from_fn(&g, |x| x * (1.0 - x).powi(2));
        let s = StateSnapshot {
            t: 0.0,
            fields: vec![f],
            traces: Traces {
                y: 0.0,
                second: None,
                left_slope: 0.0,
            },
            input: 0.0,
        };
        let next = step(&op, &s, 0.01, 0.0).unwrap();
        let v = next.fields[0].samples();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[30], 0.0);
    }

    #[test]
    fn incompatible_initial_data_is_rejected() {
        let c = ConfigBuilder {
            n: Some(41),
            t_end: Some(0.1),
            ..Default::default()
        }
        .build()
        .unwrap();
        let g = c.grid().unwrap();
        let bad = Field::from_fn(&g, |x| x);
        let err = simulate(&c, &SystemVariant::target(1.0), &[bad]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn variant_requirements() {
        let g = grid(31);
        let mut v = SystemVariant::error(zero_gains(&g).1);
        v.injection = None;
        assert!(build_operator(&g, &v).is_err());
        assert!(build_operator(&grid(15), &SystemVariant::target(1.0)).is_err());
    }

    #[test]
    fn sampled_signal_interpolates_and_differentiates() {
        let s = SampledSignal {
            dt: 0.5,
            values: vec![0.0, 1.0, 4.0, 9.0],
        };
        assert_eq!(s.at(0.25), 0.5);
        assert_eq!(s.at(10.0), 9.0);
        let d = s.derivative();
        // t^2 sampled at t = 0, 0.5, 1, 1.5 in units where v = (2t)^2
        assert!((d.values[1] - 4.0).abs() < 1e-12);
        assert!((d.values[0] - 0.0).abs() < 1e-12);
    }
}
