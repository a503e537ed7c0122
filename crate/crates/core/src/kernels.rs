//! Backstepping kernels on the triangle `{0 <= x <= y <= L}`.
//!
//! The gain kernel `k` solves
//!
//! ```text
//! k_xxx + k_yyy + k_x + k_y + lambda k = 0,
//! k(x, L) = 0,  k(x, x) = 0,  k_x(x, x) = lambda (L - x) / 3,
//! ```
//!
//! and the observer kernel `p` solves the mirrored system
//!
//! ```text
//! p_xxx + p_yyy + p_x + p_y - lambda p = 0,
//! p(0, y) = 0,  p(x, x) = 0,  p_x(x, x) = lambda x / 3.
//! ```
//!
//! The two are related by `p(x, y) = k(L - y, L - x)`. There is no marching
//! order for this third-order Goursat problem, so the solver collects
//! finite-difference residuals of the PDE and of the slope condition into one
//! overdetermined sparse system and solves it in least squares with a sparse
//! QR factorization. The Dirichlet conditions are eliminated.
//!
//! Each unknown node carries the PDE twice, discretized with two different
//! fourth-order stencil families. With a single family the least-squares
//! system has near-null modes that are rough across the diagonal and along
//! `x = 0`, invisible to that family but not to any other consistent
//! discretization. The second family removes them.

use faer::sparse::{SparseColMat, Triplet};
use faer::linalg::solvers::SolveLstsq;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mesh::{clamped_window, exact_fd_weights, two_sum, Compensated, IntervalGrid, TriangleGrid};

/// Default least-squares acceptance tolerance.
pub const DEFAULT_KERNEL_TOL: f64 = 1e-6;
/// Smallest grid the kernel stencils fit on.
pub const MIN_KERNEL_NODES: usize = 21;

/// Which of the two Goursat systems a kernel satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelSide {
    /// Controller kernel `k`: Dirichlet on the diagonal and on `y = L`.
    Gain,
    /// Observer kernel `p`: Dirichlet on the diagonal and on `x = 0`.
    Observer,
}

impl KernelSide {
    /// Coefficient of the zeroth-order term in the PDE.
    fn reaction(self, lambda: f64) -> f64 {
        match self {
            KernelSide::Gain => lambda,
            KernelSide::Observer => -lambda,
        }
    }

    /// Prescribed `d/dx` of the kernel on the diagonal at `x`.
    pub fn diagonal_slope(self, lambda: f64, length: f64, x: f64) -> f64 {
        match self {
            KernelSide::Gain => lambda * (length - x) / 3.0,
            KernelSide::Observer => lambda * x / 3.0,
        }
    }

    /// Non-Dirichlet node on the boundary of the triangle.
    fn is_free_edge(self, tri: &TriangleGrid, i: usize, j: usize) -> bool {
        !self.is_dirichlet(tri, i, j) && (tri.is_left_edge(i, j) || tri.is_top_edge(i, j))
    }

    fn is_dirichlet(self, tri: &TriangleGrid, i: usize, j: usize) -> bool {
        tri.is_diagonal(i, j)
            || match self {
                KernelSide::Gain => tri.is_top_edge(i, j),
                KernelSide::Observer => tri.is_left_edge(i, j),
            }
    }
}

/// Residual norms of a kernel. PDE entries are in PDE units, slope entries in
/// units of the prescribed derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualReport {
    pub interior_rms: f64,
    pub interior_max: f64,
    pub slope_rms: f64,
    pub slope_max: f64,
    /// max |kernel| on the diagonal
    pub diagonal_max: f64,
    /// max |kernel| on the Dirichlet edge (`y = L` for k, `x = 0` for p)
    pub edge_max: f64,
    /// number of PDE rows that entered the interior RMS
    pub interior_rows: usize,
    /// PDE residual RMS on the edge that carries no Dirichlet data
    /// (`x = 0` for k, `y = L` for p)
    pub free_edge_rms: f64,
}

/// Common read access for grid-sampled kernels.
pub trait TriangleKernel {
    fn tri(&self) -> &TriangleGrid;
    fn values(&self) -> &[f64];
    /// Low-order parts carried by solved kernels: the kernel value at node
    /// `q` is `values()[q] + corrections()[q]` in double-double precision.
    /// Residual evaluations use them so that rounding the stored values to
    /// `f64` does not dominate third-derivative stencils on fine grids.
    fn corrections(&self) -> Option<&[f64]> {
        None
    }
    fn lambda(&self) -> f64;
    fn side(&self) -> KernelSide;

    fn at(&self, i: usize, j: usize) -> f64 {
        self.values()[self.tri().index(i, j)]
    }

    fn max_abs(&self) -> f64 {
        self.values().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Controller kernel `k(x_i, y_j)` on the triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainKernel {
    tri: TriangleGrid,
    values: Vec<f64>,
    corrections: Vec<f64>,
    lambda: f64,
    residual_report: ResidualReport,
}

/// Observer kernel `p(x_i, y_j)` on the triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverKernel {
    tri: TriangleGrid,
    values: Vec<f64>,
    corrections: Vec<f64>,
    lambda: f64,
    residual_report: Option<ResidualReport>,
}

impl GainKernel {
    pub fn residual_report(&self) -> &ResidualReport {
        &self.residual_report
    }

    /// Builds a gain kernel from raw samples without solving anything. The
    /// Dirichlet invariants are not enforced; meant for fixtures and loading.
    pub fn from_values(tri: TriangleGrid, values: Vec<f64>, lambda: f64) -> Result<Self> {
        if values.len() != tri.len() {
            return invalid(format!(
                "kernel needs {} values, got {}",
                tri.len(),
                values.len()
            ));
        }
        Ok(Self {
            tri,
            values,
            corrections: Vec::new(),
            lambda,
            residual_report: ResidualReport::default(),
        })
    }
}

impl ObserverKernel {
    /// Present only when the kernel came from a direct solve.
    pub fn residual_report(&self) -> Option<&ResidualReport> {
        self.residual_report.as_ref()
    }
}

impl TriangleKernel for GainKernel {
    fn tri(&self) -> &TriangleGrid {
        &self.tri
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
    fn corrections(&self) -> Option<&[f64]> {
        (!self.corrections.is_empty()).then_some(self.corrections.as_slice())
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn side(&self) -> KernelSide {
        KernelSide::Gain
    }
}

impl TriangleKernel for ObserverKernel {
    fn tri(&self) -> &TriangleGrid {
        &self.tri
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
    fn corrections(&self) -> Option<&[f64]> {
        (!self.corrections.is_empty()).then_some(self.corrections.as_slice())
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn side(&self) -> KernelSide {
        KernelSide::Observer
    }
}

/// Output-injection gain `p_1(x_i) = p(x_i, L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionGain {
    pub grid: IntervalGrid,
    pub samples: Vec<f64>,
}

/// Feedback gain row `k(0, y_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackGainRow {
    pub grid: IntervalGrid,
    pub samples: Vec<f64>,
}

// Stencil families. `primary` and `secondary` enter the solve, `check` is
// reserved for the independent residual evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Primary,
    Secondary,
    Check,
}

impl Family {
    /// Window width for a derivative of order `m`. All widths are odd so
    /// windows mirror exactly under `(x, y) -> (L - y, L - x)`.
    fn width(self, m: usize) -> usize {
        match self {
            Family::Primary => m + 4,
            Family::Secondary => m + 6,
            Family::Check => m + 8,
        }
    }
}

/// Offsets and exact weights for `d^m/ds^m` at `pos` on the index range
/// `[lo, hi]`, or `None` when the range is too short for this family.
fn line_stencil(family: Family, pos: usize, lo: usize, hi: usize, m: usize) -> Option<(Vec<isize>, Vec<(f64, f64)>)> {
    let offsets = clamped_window(pos, lo, hi, family.width(m))?;
    let weights = exact_fd_weights(&offsets, m);
    Some((offsets, weights))
}

/// `scale * sum (hi + lo) * kernel(i, j)` over `terms`. Keeping the scale
/// outside the sum lets the cancellation inside a stencil happen in
/// double-double before the `1/h^m` amplification.
struct Part {
    scale: f64,
    terms: Vec<(usize, usize, (f64, f64))>,
}

type NodeRow = Vec<Part>;

fn evaluate(row: &NodeRow, tri: &TriangleGrid, values: &[f64], corrections: Option<&[f64]>) -> f64 {
    row.iter()
        .map(|part| {
            let mut acc = Compensated::default();
            for &(a, b, (hi, lo)) in &part.terms {
                let q = tri.index(a, b);
                let v = values[q];
                acc.add_prod(hi, v);
                acc.add_prod(lo, v);
                if let Some(c) = corrections {
                    acc.add_prod(hi, c[q]);
                }
            }
            acc.value() * part.scale
        })
        .sum()
}

/// PDE row at `(i, j)` in PDE units, or `None` when a line through the node
/// is too short for the family's stencils.
fn pde_row(tri: &TriangleGrid, side: KernelSide, lambda: f64, family: Family, i: usize, j: usize) -> Option<NodeRow> {
    let n = tri.n();
    let h = tri.base().spacing();
    let mut row = Vec::with_capacity(5);
    for m in [3usize, 1] {
        let scale = h.powi(-(m as i32));
        let (ox, wx) = line_stencil(family, i, 0, j, m)?;
        let (oy, wy) = line_stencil(family, j, i, n - 1, m)?;
        row.push(Part {
            scale,
            terms: ox
                .iter()
                .zip(wx)
                .map(|(o, w)| ((i as isize + o) as usize, j, w))
                .collect(),
        });
        row.push(Part {
            scale,
            terms: oy
                .iter()
                .zip(wy)
                .map(|(o, w)| (i, (j as isize + o) as usize, w))
                .collect(),
        });
    }
    row.push(Part {
        scale: side.reaction(lambda),
        terms: vec![(i, j, (1.0, 0.0))],
    });
    Some(row)
}

/// Slope row at diagonal node `i`: approximates `d/dx` of the kernel at
/// `(x_i, x_i)`. One-sided `points`-point stencil leaning away from the
/// Dirichlet edge, switching to `-d/dy` (the diagonal is a zero level set, so
/// `k_x = -k_y` there) where the preferred direction runs out of nodes.
fn slope_row(tri: &TriangleGrid, side: KernelSide, i: usize, points: usize) -> NodeRow {
    let n = tri.n();
    let h = tri.base().spacing();
    let backward_x = || {
        let offsets: Vec<isize> = (-(points as isize - 1)..=0).collect();
        let w = exact_fd_weights(&offsets, 1);
        Part {
            scale: 1.0 / h,
            terms: offsets
                .iter()
                .zip(w)
                .map(|(o, c)| ((i as isize + o) as usize, i, c))
                .collect(),
        }
    };
    let forward_y = || {
        let offsets: Vec<isize> = (0..points as isize).collect();
        let w = exact_fd_weights(&offsets, 1);
        Part {
            scale: -1.0 / h,
            terms: offsets
                .iter()
                .zip(w)
                .map(|(o, c)| (i, (i as isize + o) as usize, c))
                .collect(),
        }
    };
    let has_backward = i + 1 >= points;
    let has_forward = i + points <= n;
    let part = match side {
        KernelSide::Gain if has_backward => backward_x(),
        KernelSide::Gain => forward_y(),
        KernelSide::Observer if has_forward => forward_y(),
        KernelSide::Observer => backward_x(),
    };
    vec![part]
}

const SOLVER_SLOPE_POINTS: usize = 3;
const CHECK_SLOPE_POINTS: usize = 6;
const REFINEMENT_STEPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Pde,
    FreeEdgePde,
    Slope,
}

struct AssembledRow {
    row: NodeRow,
    target: f64,
    /// multiplier applied before the solve
    weight: f64,
    kind: RowKind,
}

struct Assembly {
    matrix: SparseColMat<usize, f64>,
    rows: Vec<AssembledRow>,
    /// unknown column for each triangle node, `None` on Dirichlet nodes
    column: Vec<Option<usize>>,
}

fn assemble(tri: &TriangleGrid, side: KernelSide, lambda: f64) -> Result<Assembly> {
    let n = tri.n();
    let h = tri.base().spacing();
    let length = tri.base().length();

    let mut column = vec![None; tri.len()];
    let mut unknowns = 0;
    for (i, j) in tri.nodes() {
        if !side.is_dirichlet(tri, i, j) {
            column[tri.index(i, j)] = Some(unknowns);
            unknowns += 1;
        }
    }

    let mut triplets = Vec::new();
    let mut rows = Vec::new();
    let mut push_row = |row: NodeRow, target: f64, weight: f64, kind: RowKind| {
        let r = rows.len();
        let before = triplets.len();
        for part in &row {
            for &(a, b, (hi, lo)) in &part.terms {
                if let Some(col) = column[tri.index(a, b)] {
                    triplets.push(Triplet::new(r, col, (hi + lo) * part.scale * weight));
                }
            }
        }
        if triplets.len() > before {
            rows.push(AssembledRow {
                row,
                target,
                weight,
                kind,
            });
        }
    };

    let pde_weight = h.powi(3);
    for family in [Family::Primary, Family::Secondary] {
        for (i, j) in tri.nodes() {
            if side.is_dirichlet(tri, i, j) {
                continue;
            }
            if let Some(row) = pde_row(tri, side, lambda, family, i, j) {
                let kind = if side.is_free_edge(tri, i, j) {
                    RowKind::FreeEdgePde
                } else {
                    RowKind::Pde
                };
                push_row(row, 0.0, pde_weight, kind);
            }
        }
    }
    for i in 0..n {
        let row = slope_row(tri, side, i, SOLVER_SLOPE_POINTS);
        let target = side.diagonal_slope(lambda, length, tri.base().node(i));
        push_row(row, target, h, RowKind::Slope);
    }

    if rows.len() < unknowns {
        return invalid(format!(
            "kernel system underdetermined: {} rows for {unknowns} unknowns",
            rows.len()
        ));
    }
    let matrix = SparseColMat::try_new_from_triplets(rows.len(), unknowns, &triplets)
        .map_err(|e| Error::NumericFailure(format!("kernel matrix assembly: {e:?}")))?;
    Ok(Assembly {
        matrix,
        rows,
        column,
    })
}

/// Unweighted residual of every assembled row, evaluated with exact weights.
fn row_residuals(asm: &Assembly, tri: &TriangleGrid, values: &[f64], corrections: &[f64]) -> Vec<f64> {
    asm.rows
        .iter()
        .map(|r| evaluate(&r.row, tri, values, Some(corrections)) - r.target)
        .collect()
}

struct Solved {
    values: Vec<f64>,
    corrections: Vec<f64>,
    report: ResidualReport,
}

fn solve_side(tri: &TriangleGrid, side: KernelSide, lambda: f64, tol: f64) -> Result<Solved> {
    if tri.n() < MIN_KERNEL_NODES {
        return invalid(format!(
            "kernel solve needs at least {MIN_KERNEL_NODES} nodes per edge, got {}",
            tri.n()
        ));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return invalid(format!("lambda must be non-negative, got {lambda}"));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return invalid(format!("kernel tolerance must be positive, got {tol}"));
    }
    let asm = assemble(tri, side, lambda)?;
    let qr = asm
        .matrix
        .sp_qr()
        .map_err(|e| Error::NumericFailure(format!("sparse QR: {e:?}")))?;

    let mut values = vec![0.0; tri.len()];
    let mut corrections = vec![0.0; tri.len()];
    let mut rhs = Mat::<f64>::from_fn(asm.rows.len(), 1, |r, _| asm.rows[r].target * asm.rows[r].weight);
    // The first pass solves from zero; later passes correct with residuals
    // evaluated in extended precision and accumulate the solution in
    // double-double, which removes the rounding noise the factorization
    // leaves behind.
    for pass in 0..=REFINEMENT_STEPS {
        if pass > 0 {
            let r = row_residuals(&asm, tri, &values, &corrections);
            rhs = Mat::<f64>::from_fn(r.len(), 1, |i, _| -r[i] * asm.rows[i].weight);
        }
        qr.solve_lstsq_in_place(rhs.as_mut());
        for ((hi, lo), col) in values.iter_mut().zip(corrections.iter_mut()).zip(&asm.column) {
            if let Some(c) = col {
                let (s, e) = two_sum(*hi, rhs[(*c, 0)]);
                let (s, e) = two_sum(s, e + *lo);
                *hi = s;
                *lo = e;
            }
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("kernel solve produced non-finite values".into()));
    }

    let report = solver_report(tri, side, &asm, &values, &corrections);
    let max_abs = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if report.interior_rms > tol * max_abs.max(1.0) || report.slope_rms > tol {
        return Err(Error::KernelSolve {
            tol,
            interior_rms: report.interior_rms,
            slope_rms: report.slope_rms,
        });
    }
    Ok(Solved {
        values,
        corrections,
        report,
    })
}

/// Residuals of the assembled rows, in physical units.
fn solver_report(
    tri: &TriangleGrid,
    side: KernelSide,
    asm: &Assembly,
    values: &[f64],
    corrections: &[f64],
) -> ResidualReport {
    let residual = row_residuals(asm, tri, values, corrections);
    let mut pde = Vec::new();
    let mut edge = Vec::new();
    let mut slope = Vec::new();
    for (r, row) in residual.iter().zip(&asm.rows) {
        match row.kind {
            RowKind::Pde => pde.push(*r),
            RowKind::FreeEdgePde => edge.push(*r),
            RowKind::Slope => slope.push(*r),
        }
    }
    let (diagonal_max, edge_max) = dirichlet_maxima(tri, side, values);
    ResidualReport {
        interior_rms: rms(&pde),
        interior_max: max_abs(&pde),
        slope_rms: rms(&slope),
        slope_max: max_abs(&slope),
        diagonal_max,
        edge_max,
        interior_rows: pde.len(),
        free_edge_rms: rms(&edge),
    }
}

fn dirichlet_maxima(tri: &TriangleGrid, side: KernelSide, values: &[f64]) -> (f64, f64) {
    let mut diagonal = 0.0_f64;
    let mut edge = 0.0_f64;
    for (i, j) in tri.nodes() {
        let v = values[tri.index(i, j)].abs();
        if tri.is_diagonal(i, j) {
            diagonal = diagonal.max(v);
        }
        let on_edge = match side {
            KernelSide::Gain => tri.is_top_edge(i, j),
            KernelSide::Observer => tri.is_left_edge(i, j),
        };
        if on_edge {
            edge = edge.max(v);
        }
    }
    (diagonal, edge)
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Solves the gain-kernel system on `tri` and certifies the result against
/// `tol` (interior RMS relative to `max(1, max|k|)`, slope RMS absolute).
pub fn solve_gain_kernel(tri: &TriangleGrid, lambda: f64, tol: f64) -> Result<GainKernel> {
    let solved = solve_side(tri, KernelSide::Gain, lambda, tol)?;
    Ok(GainKernel {
        tri: tri.clone(),
        values: solved.values,
        corrections: solved.corrections,
        lambda,
        residual_report: solved.report,
    })
}

/// Solves the observer-kernel system directly in its own coordinates. Used as
/// an oracle for [`observer_kernel_from_gain`].
pub fn solve_observer_kernel(tri: &TriangleGrid, lambda: f64, tol: f64) -> Result<ObserverKernel> {
    let solved = solve_side(tri, KernelSide::Observer, lambda, tol)?;
    Ok(ObserverKernel {
        tri: tri.clone(),
        values: solved.values,
        corrections: solved.corrections,
        lambda,
        residual_report: Some(solved.report),
    })
}

fn reflect_all(tri: &TriangleGrid, data: &[f64]) -> Vec<f64> {
    if data.is_empty() {
        return Vec::new();
    }
    tri.nodes()
        .map(|(i, j)| {
            let (a, b) = tri.reflect(i, j);
            data[tri.index(a, b)]
        })
        .collect()
}

/// `p(x_i, y_j) = k(L - y_j, L - x_i)`.
pub fn observer_kernel_from_gain(k: &GainKernel) -> ObserverKernel {
    ObserverKernel {
        values: reflect_all(&k.tri, &k.values),
        corrections: reflect_all(&k.tri, &k.corrections),
        tri: k.tri.clone(),
        lambda: k.lambda,
        residual_report: None,
    }
}

/// Inverse of [`observer_kernel_from_gain`]. The reflection is an index
/// permutation, so the round trip is exact.
pub fn gain_kernel_from_observer(p: &ObserverKernel) -> GainKernel {
    GainKernel {
        values: reflect_all(&p.tri, &p.values),
        corrections: reflect_all(&p.tri, &p.corrections),
        tri: p.tri.clone(),
        lambda: p.lambda,
        residual_report: p.residual_report.unwrap_or_default(),
    }
}

/// `p_1(x_i) = p(x_i, L)`.
pub fn injection_gain(p: &ObserverKernel) -> InjectionGain {
    let n = p.tri.n();
    InjectionGain {
        grid: p.tri.base().clone(),
        samples: (0..n).map(|i| p.at(i, n - 1)).collect(),
    }
}

/// `k(0, y_j)`.
pub fn feedback_gain_row(k: &GainKernel) -> FeedbackGainRow {
    let n = k.tri.n();
    FeedbackGainRow {
        grid: k.tri.base().clone(),
        samples: (0..n).map(|j| k.at(0, j)).collect(),
    }
}

/// Re-evaluates the PDE and boundary residuals of any kernel with stencils
/// that differ from the solver's: wider PDE windows and a 6-point slope
/// formula. Rows whose lines are too short for the wider windows are skipped.
pub fn kernel_residual<K: TriangleKernel + ?Sized>(kernel: &K) -> ResidualReport {
    let tri = kernel.tri();
    let side = kernel.side();
    let lambda = kernel.lambda();
    let values = kernel.values();
    let n = tri.n();
    let length = tri.base().length();
    let eval = |row: &NodeRow| evaluate(row, tri, values, kernel.corrections());

    let mut pde = Vec::new();
    let mut edge = Vec::new();
    for (i, j) in tri.nodes() {
        if side.is_dirichlet(tri, i, j) {
            continue;
        }
        if let Some(row) = pde_row(tri, side, lambda, Family::Check, i, j) {
            if side.is_free_edge(tri, i, j) {
                edge.push(eval(&row));
            } else {
                pde.push(eval(&row));
            }
        }
    }
    let mut slope = Vec::new();
    for i in 0..n {
        let row = slope_row(tri, side, i, CHECK_SLOPE_POINTS.min(n));
        slope.push(eval(&row) - side.diagonal_slope(lambda, length, tri.base().node(i)));
    }
    let (diagonal_max, edge_max) = dirichlet_maxima(tri, side, values);
    ResidualReport {
        interior_rms: rms(&pde),
        interior_max: max_abs(&pde),
        slope_rms: rms(&slope),
        slope_max: max_abs(&slope),
        diagonal_max,
        edge_max,
        interior_rows: pde.len(),
        free_edge_rms: rms(&edge),
    }
}
