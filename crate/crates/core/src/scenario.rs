//! End-to-end runs: kernel synthesis, the observer-based closed loop with its
//! diagnostics, parameter sweeps and spectra, plus the file formats they
//! write. Every file is named `<output_prefix>_<artifact>.<ext>` and contains
//! no wall-clock data, so identical configurations give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ObserverStart, SimConfig};
use crate::diagnostics::{
    choose_weights, fit_decay_rate, gain_bound_d, h3_norm, lyapunov_series, norm_equivalence_report, spectrum,
    trace_bound_check, trace_constants, SpectrumReport,
};
use crate::dynamics::{build_operator, simulate, StateSnapshot, SystemVariant, Trajectory, VariantTag};
use crate::error::{Error, Result};
use crate::kernels::{
    feedback_gain_row, injection_gain, kernel_residual, observer_kernel_from_gain, solve_gain_kernel, FeedbackGainRow,
    GainKernel, InjectionGain, ObserverKernel, ResidualReport, TriangleKernel,
};
use crate::mesh::TriangleGrid;
use crate::transforms::{apply_volterra, invert_volterra, Field};

/// Gains for one `(L, lambda, n)`.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub gain: GainKernel,
    pub observer: ObserverKernel,
    pub feedback: FeedbackGainRow,
    pub injection: InjectionGain,
    /// independent re-evaluation of the gain kernel residuals
    pub gain_check: ResidualReport,
    pub observer_check: ResidualReport,
}

/// Solves the gain kernel and reflects it to the observer kernel.
pub fn synthesize(config: &SimConfig) -> Result<Synthesis> {
    let tri = TriangleGrid::new(config.grid()?);
    let gain = solve_gain_kernel(&tri, config.lambda, config.kernel_tol)?;
    let observer = observer_kernel_from_gain(&gain);
    Ok(Synthesis {
        feedback: feedback_gain_row(&gain),
        injection: injection_gain(&observer),
        gain_check: kernel_residual(&gain),
        observer_check: kernel_residual(&observer),
        gain,
        observer,
    })
}

/// `<prefix>_<artifact>.<ext>`
pub fn artifact_path(prefix: &str, artifact: &str, ext: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}_{artifact}.{ext}"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Kernel samples as `x,y,value`, one row per triangle node.
pub fn kernel_csv<K: TriangleKernel + ?Sized>(kernel: &K, length: f64, residual: f64) -> String {
    let tri = kernel.tri();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# L={} lambda={} n={} residual={}",
        length,
        kernel.lambda(),
        tri.n(),
        num(residual)
    );
    out.push_str("x,y,value\n");
    let x = tri.base().nodes();
    for (i, j) in tri.nodes() {
        let _ = writeln!(out, "{},{},{}", num(x[i]), num(x[j]), num(kernel.at(i, j)));
    }
    out
}

fn profile_csv(axis: &str, nodes: &[f64], values: &[f64]) -> String {
    let mut out = format!("{axis},value\n");
    for (x, v) in nodes.iter().zip(values) {
        let _ = writeln!(out, "{},{}", num(*x), num(*v));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub length: f64,
    pub lambda: f64,
    pub n: usize,
    pub kernel_tol: f64,
    pub max_abs_k: f64,
    pub solver: ResidualReport,
    pub gain_check: ResidualReport,
    pub observer_check: ResidualReport,
    pub files: Vec<String>,
}

/// Writes `k`, `p`, `k(0, .)`, `p_1` and a residual summary.
pub fn run_synthesis(config: &SimConfig) -> Result<SynthesisSummary> {
    let s = synthesize(config)?;
    let prefix = &config.output_prefix;
    let nodes = s.feedback.grid.nodes().to_vec();
    let files = [
        (
            artifact_path(prefix, "kernel_k", "csv"),
            kernel_csv(&s.gain, config.length, s.gain_check.interior_rms),
        ),
        (
            artifact_path(prefix, "kernel_p", "csv"),
            kernel_csv(&s.observer, config.length, s.observer_check.interior_rms),
        ),
        (
            artifact_path(prefix, "feedback_row", "csv"),
            profile_csv("y", &nodes, &s.feedback.samples),
        ),
        (
            artifact_path(prefix, "injection_gain", "csv"),
            profile_csv("x", &nodes, &s.injection.samples),
        ),
    ];
    let mut names = Vec::new();
    for (path, body) in &files {
        write_file(path, body)?;
        names.push(path.display().to_string());
    }
    let summary_path = artifact_path(prefix, "kernel_residual", "json");
    names.push(summary_path.display().to_string());
    let summary = SynthesisSummary {
        length: config.length,
        lambda: config.lambda,
        n: config.n,
        kernel_tol: config.kernel_tol,
        max_abs_k: s.gain.max_abs(),
        solver: s.gain.residual_report().clone(),
        gain_check: s.gain_check,
        observer_check: s.observer_check,
        files: names,
    };
    write_file(&summary_path, &to_json(&summary)?)?;
    Ok(summary)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Io(format!("JSON encoding failed: {e}")))
}

/// Per-step diagnostics of a closed-loop run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsTable {
    pub t: Vec<f64>,
    pub norm_u: Vec<f64>,
    pub norm_uhat: Vec<f64>,
    pub norm_err: Vec<f64>,
    pub h3_u: Vec<f64>,
    pub y: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
    pub v: Vec<f64>,
    pub trace_lhs: Vec<f64>,
    pub trace_rhs: Vec<f64>,
}

impl DiagnosticsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,norm_u,norm_uhat,norm_err,H3_u,y,V1,V2,V3,V,trace_lhs,trace_rhs\n");
        for k in 0..self.t.len() {
            let row = [
                self.t[k],
                self.norm_u[k],
                self.norm_uhat[k],
                self.norm_err[k],
                self.h3_u[k],
                self.y[k],
                self.v1[k],
                self.v2[k],
                self.v3[k],
                self.v[k],
                self.trace_lhs[k],
                self.trace_rhs[k],
            ];
            let line: Vec<String> = row.iter().map(|v| num(*v)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Summary of one closed-loop run. Fits are `None` when the norms vanish
/// (zero initial data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lambda: f64,
    /// decay rate fitted to `||u|| + ||uhat||`
    pub lambda_fit: Option<f64>,
    /// decay rate fitted to the discrete `H^3` norm of `u`
    pub lambda_fit_h3: Option<f64>,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "A")]
    pub a_weight: f64,
    #[serde(rename = "B")]
    pub b_weight: f64,
    /// trace-inequality constants `a, b` and the norm ratios they use
    pub a: f64,
    pub b: f64,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
    pub max_real_eig: f64,
    pub slack_min: f64,
    pub open_loop: bool,
    pub kernel_interior_rms: f64,
}

/// Everything a closed-loop run produces, before it is written out.
#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    /// `(what, wtilde) = (Pi uhat, Pi_o^{-1}(u - uhat))` per step
    pub transformed: Trajectory,
    pub diagnostics: DiagnosticsTable,
    pub summary: RunSummary,
    pub spectrum: SpectrumReport,
}

/// Initial plant and observer states from the configuration.
pub fn initial_states(config: &SimConfig) -> Result<(Field, Field)> {
    let grid = config.grid()?;
    let u0 = config.initial_condition.sample(&grid)?;
    let uhat0 = match config.observer_start {
        ObserverStart::Zero => Field::zeros(&grid),
        ObserverStart::Plant => u0.clone(),
    };
    Ok((u0, uhat0))
}

fn transformed_snapshot(s: &StateSnapshot, synthesis: &Synthesis) -> Result<StateSnapshot> {
    let (u, uhat) = (&s.fields[0], &s.fields[1]);
    let what = apply_volterra(&synthesis.gain, uhat)?;
    let err = u.combine(1.0, uhat, -1.0)?;
    let wtilde = invert_volterra(&synthesis.observer, &err)?;
    let traces = s.traces;
    Ok(StateSnapshot {
        t: s.t,
        fields: vec![what, wtilde],
        traces,
        input: s.input,
    })
}

/// Simulates the closed loop (or the open loop with `config.open_loop`) and
/// evaluates every diagnostic.
pub fn closed_loop(config: &SimConfig, synthesis: &Synthesis) -> Result<ClosedLoopRun> {
    let (u0, uhat0) = initial_states(config)?;
    closed_loop_from(config, synthesis, u0, uhat0)
}

pub fn closed_loop_from(config: &SimConfig, synthesis: &Synthesis, u0: Field, uhat0: Field) -> Result<ClosedLoopRun> {
    let variant = SystemVariant::closed_loop(
        synthesis.feedback.clone(),
        synthesis.injection.clone(),
        config.open_loop,
    );
    let grid = config.grid()?;
    let op = build_operator(&grid, &variant)?;
    let spec = spectrum(&op)?;
    let trajectory = simulate(config, &variant, &[u0, uhat0])?;
    let transformed = Trajectory {
        tag: VariantTag::CoupledTarget,
        dt: trajectory.dt,
        lambda: config.lambda,
        snapshots: trajectory
            .snapshots
            .iter()
            .map(|s| transformed_snapshot(s, synthesis))
            .collect::<Result<_>>()?,
    };

    let d = gain_bound_d(&synthesis.injection, &synthesis.gain)?;
    let trace = trace_bound_check(&transformed)?;
    let equivalence = norm_equivalence_report(&transformed).ok();
    let (a, b) = match &equivalence {
        Some(eq) => {
            let c = trace_constants(&trace, eq, config.length, config.lambda)?;
            (c.a, c.b)
        }
        None => (0.0, 1.0 / config.length),
    };
    let (auto_a, auto_b) = if config.epsilon > 0.0 {
        choose_weights(d, a, b, config.lambda, config.epsilon)?
    } else {
        (1.0, 1.0)
    };
    let weight_a = config.weight_a.unwrap_or(auto_a);
    let weight_b = config.weight_b.unwrap_or(auto_b);
    let lyap = lyapunov_series(&transformed, weight_a, weight_b)?;

    let mut table = DiagnosticsTable::default();
    for (k, s) in trajectory.snapshots.iter().enumerate() {
        let (u, uhat) = (&s.fields[0], &s.fields[1]);
        table.t.push(s.t);
        table.norm_u.push(u.norm_l2());
        table.norm_uhat.push(uhat.norm_l2());
        table.norm_err.push(u.combine(1.0, uhat, -1.0)?.norm_l2());
        table.h3_u.push(h3_norm(u)?);
        table.y.push(s.traces.y);
        table.v1.push(lyap.v1[k]);
        table.v2.push(lyap.v2[k]);
        table.v3.push(lyap.v3[k]);
        table.v.push(lyap.v[k]);
        table.trace_lhs.push(trace.steps[k].lhs);
        table.trace_rhs.push(trace.steps[k].rhs);
    }
    let combined: Vec<f64> = table.norm_u.iter().zip(&table.norm_uhat).map(|(a, b)| a + b).collect();
    let summary = RunSummary {
        lambda: config.lambda,
        lambda_fit: fit_decay_rate(&table.t, &combined).ok(),
        lambda_fit_h3: fit_decay_rate(&table.t, &table.h3_u).ok(),
        d,
        a_weight: weight_a,
        b_weight: weight_b,
        a,
        b,
        d1: equivalence.map(|e| e.d1),
        d2: equivalence.map(|e| e.d2),
        max_real_eig: spec.max_real,
        slack_min: trace.slack_min(),
        open_loop: config.open_loop,
        kernel_interior_rms: synthesis.gain_check.interior_rms,
    };
    Ok(ClosedLoopRun {
        trajectory,
        transformed,
        diagnostics: table,
        summary,
        spectrum: spec,
    })
}

/// Long-format `t,x,u,uhat`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,x,u,uhat\n");
    for s in &traj.snapshots {
        let u = s.fields[0].samples();
        let uhat = s.fields.get(1).map(|f| f.samples());
        for (i, x) in s.fields[0].grid().nodes().iter().enumerate() {
            let uh = uhat.map_or(0.0, |v| v[i]);
            let _ = writeln!(out, "{},{},{},{}", num(s.t), num(*x), num(u[i]), num(uh));
        }
    }
    out
}

/// Synthesizes the gains, runs the loop, and writes the trajectory,
/// diagnostics and summary files.
pub fn run_closed_loop(config: &SimConfig) -> Result<RunSummary> {
    let synthesis = synthesize(config)?;
    let run = closed_loop(config, &synthesis)?;
    let prefix = &config.output_prefix;
    write_file(&artifact_path(prefix, "trajectory", "csv"), &trajectory_csv(&run.trajectory))?;
    write_file(&artifact_path(prefix, "diagnostics", "csv"), &run.diagnostics.to_csv())?;
    write_file(&artifact_path(prefix, "summary", "json"), &to_json(&run.summary)?)?;
    Ok(run.summary)
}

/// One row of a sweep; `error` is set when that entry failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

fn sweep_entry(config: &SimConfig, lambda: f64) -> SweepEntry {
    let outcome = config
        .with_lambda(lambda)
        .and_then(|c| synthesize(&c).and_then(|s| closed_loop(&c, &s)));
    match outcome {
        Ok(run) => SweepEntry {
            lambda,
            summary: Some(run.summary),
            error: None,
        },
        Err(e) => SweepEntry {
            lambda,
            summary: None,
            error: Some(e.to_string()),
        },
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

/// Runs the closed loop for every `lambda` concurrently and writes one
/// summary per entry plus the aggregate `lambda,lambda_fit,max_real_eig,status`.
pub fn run_sweep(config: &SimConfig, lambdas: &[f64]) -> Result<Vec<SweepEntry>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    let mut entries: Vec<Option<SweepEntry>> = vec![None; lambdas.len()];
    for (chunk_lambdas, chunk_out) in lambdas.chunks(workers).zip(entries.chunks_mut(workers)) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk_lambdas
                .iter()
                .map(|&lambda| scope.spawn(move || sweep_entry(config, lambda)))
                .collect();
            for (slot, handle) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(handle.join().unwrap_or_else(|_| SweepEntry {
                    lambda: f64::NAN,
                    summary: None,
                    error: Some("sweep worker panicked".into()),
                }));
            }
        });
    }
    let entries: Vec<SweepEntry> = entries.into_iter().map(|e| e.expect("every slot filled")).collect();

    let prefix = &config.output_prefix;
    let mut aggregate = String::from("lambda,lambda_fit,max_real_eig,status\n");
    for (i, e) in entries.iter().enumerate() {
        let (fit, eig, status) = match (&e.summary, &e.error) {
            (Some(s), _) => (opt(s.lambda_fit), num(s.max_real_eig), "ok".to_string()),
            (None, err) => (
                String::new(),
                String::new(),
                format!("\"{}\"", err.clone().unwrap_or_default().replace('"', "'")),
            ),
        };
        let _ = writeln!(aggregate, "{},{fit},{eig},{status}", num(e.lambda));
        write_file(&artifact_path(prefix, &format!("sweep{i}_summary"), "json"), &to_json(e)?)?;
    }
    write_file(&artifact_path(prefix, "sweep", "csv"), &aggregate)?;
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub lambda: f64,
    pub n: usize,
    pub open_loop: bool,
    pub count: usize,
    pub max_real_eig: f64,
}

/// Eigenvalues of the closed-loop (or open-loop) block operator.
pub fn run_spectrum(config: &SimConfig) -> Result<SpectrumSummary> {
    let synthesis = synthesize(config)?;
    let variant = SystemVariant::closed_loop(synthesis.feedback, synthesis.injection, config.open_loop);
    let op = build_operator(&config.grid()?, &variant)?;
    let spec = spectrum(&op)?;
    let mut order: Vec<usize> = (0..spec.len()).collect();
    order.sort_by(|&i, &j| {
        spec.real[j]
            .total_cmp(&spec.real[i])
            .then(spec.imag[i].total_cmp(&spec.imag[j]))
    });
    let mut csv = String::from("re,im\n");
    for i in order {
        let _ = writeln!(csv, "{},{}", num(spec.real[i]), num(spec.imag[i]));
    }
    let prefix = &config.output_prefix;
    write_file(&artifact_path(prefix, "spectrum", "csv"), &csv)?;
    let summary = SpectrumSummary {
        lambda: config.lambda,
        n: config.n,
        open_loop: config.open_loop,
        count: spec.len(),
        max_real_eig: spec.max_real,
    };
    write_file(&artifact_path(prefix, "spectrum", "json"), &to_json(&summary)?)?;
    Ok(summary)
}
