//! Browser bindings: kernel profiles, closed-loop norm histories and
//! closed-loop spectra, each returned as a JSON string.

use kdv_backstep::config::{ConfigBuilder, SimConfig};
use kdv_backstep::diagnostics::spectrum as dense_spectrum;
use kdv_backstep::dynamics::{build_operator, SystemVariant};
use kdv_backstep::error::Error;
use kdv_backstep::kernels::TriangleKernel;
use kdv_backstep::scenario::{closed_loop, synthesize};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest grid the page may request; the dense step and eigen solves grow
/// cubically.
pub const MAX_NODES: usize = 121;

fn config(lambda: f64, n: usize, t_end: Option<f64>, open_loop: bool) -> Result<SimConfig, Error> {
    if n > MAX_NODES {
        return Err(Error::InvalidArgument(format!("at most {MAX_NODES} nodes in the browser")));
    }
    ConfigBuilder {
        lambda: Some(lambda),
        n: Some(n),
        t_end,
        open_loop: Some(open_loop),
        ..Default::default()
    }
    .build()
}

fn to_js<T: Serialize>(value: Result<T, Error>) -> Result<String, JsValue> {
    let value = value.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[derive(Serialize)]
pub struct Profiles {
    pub x: Vec<f64>,
    /// `k(0, y)` on the grid
    pub feedback: Vec<f64>,
    /// `p_1(x)`
    pub injection: Vec<f64>,
    pub max_abs_k: f64,
    pub interior_rms: f64,
}

pub fn profiles(lambda: f64, n: usize) -> Result<Profiles, Error> {
    let s = synthesize(&config(lambda, n, None, false)?)?;
    Ok(Profiles {
        x: s.feedback.grid.nodes().to_vec(),
        max_abs_k: s.gain.max_abs(),
        interior_rms: s.gain_check.interior_rms,
        feedback: s.feedback.samples,
        injection: s.injection.samples,
    })
}

#[derive(Serialize)]
pub struct Norms {
    pub t: Vec<f64>,
    pub norm_u: Vec<f64>,
    pub norm_uhat: Vec<f64>,
    pub lambda_fit: Option<f64>,
}

pub fn norms(lambda: f64, n: usize, t_end: f64, open_loop: bool) -> Result<Norms, Error> {
    let c = config(lambda, n, Some(t_end), open_loop)?;
    let run = closed_loop(&c, &synthesize(&c)?)?;
    Ok(Norms {
        t: run.diagnostics.t,
        norm_u: run.diagnostics.norm_u,
        norm_uhat: run.diagnostics.norm_uhat,
        lambda_fit: run.summary.lambda_fit,
    })
}

#[derive(Serialize)]
pub struct Eigenvalues {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub max_real: f64,
}

pub fn eigenvalues(lambda: f64, n: usize, open_loop: bool) -> Result<Eigenvalues, Error> {
    let c = config(lambda, n, None, open_loop)?;
    let s = synthesize(&c)?;
    let op = build_operator(&c.grid()?, &SystemVariant::closed_loop(s.feedback, s.injection, open_loop))?;
    let spec = dense_spectrum(&op)?;
    Ok(Eigenvalues {
        re: spec.real,
        im: spec.imag,
        max_real: spec.max_real,
    })
}

/// `{x, feedback, injection, max_abs_k, interior_rms}`
#[wasm_bindgen(js_name = kernelProfiles)]
pub fn kernel_profiles(lambda: f64, n: usize) -> Result<String, JsValue> {
    to_js(profiles(lambda, n))
}

/// `{t, norm_u, norm_uhat, lambda_fit}` for the default bump initial state.
#[wasm_bindgen(js_name = closedLoopNorms)]
pub fn closed_loop_norms(lambda: f64, n: usize, t_end: f64, open_loop: bool) -> Result<String, JsValue> {
    to_js(norms(lambda, n, t_end, open_loop))
}

/// `{re, im, max_real}` of the discrete closed-loop operator.
#[wasm_bindgen(js_name = closedLoopSpectrum)]
pub fn closed_loop_spectrum(lambda: f64, n: usize, open_loop: bool) -> Result<String, JsValue> {
    to_js(eigenvalues(lambda, n, open_loop))
}
