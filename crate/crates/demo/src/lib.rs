//! Browser bindings. Each export returns a JSON string; the plain Rust
//! functions underneath are what the native tests exercise.

use atrseq::attribution::{dependency_links, rollout, twin_gate_surface, SurfaceGrid};
use atrseq::cells::{count_step_matmuls_at, CellKind, CellParams, CellState};
use atrseq::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const MAX_DIM: usize = 512;
pub const MAX_LEN: usize = 64;
pub const MAX_RESOLUTION: usize = 401;

pub const CELLS: [CellKind; 5] = [CellKind::Atr, CellKind::Srnn, CellKind::Ran, CellKind::Gru, CellKind::Lstm];

/// Gap between input and forget gate over the `(x, y)` plane.
pub fn surface(lo: f64, hi: f64, resolution: usize) -> atrseq::Result<SurfaceGrid> {
    if resolution > MAX_RESOLUTION {
        return Err(atrseq::Error::Config(format!("resolution is capped at {MAX_RESOLUTION}")));
    }
    twin_gate_surface(lo, hi, resolution)
}

#[derive(Debug, Serialize)]
pub struct RolloutView {
    pub len: usize,
    pub hidden: usize,
    /// `weights[t][k]`: mean |weight| of input `k` on state `t`.
    pub weights: Vec<Vec<f64>>,
    pub links: Vec<(usize, usize)>,
    pub input_gate_mean: Vec<f64>,
    pub forget_gate_mean: Vec<f64>,
    /// Largest gap between the expansion and the recurrent states.
    pub residual: f64,
}

/// Runs a randomly initialised ATR cell over random inputs and attributes
/// each state to the inputs that built it.
pub fn rollout_view(seed: u64, len: usize, hidden: usize, input_scale: f64) -> atrseq::Result<RolloutView> {
    if len == 0 || len > MAX_LEN || hidden == 0 || hidden > MAX_DIM || !(input_scale.is_finite() && input_scale > 0.0) {
        return Err(atrseq::Error::Config(format!(
            "need 1 ≤ len ≤ {MAX_LEN}, 1 ≤ hidden ≤ {MAX_DIM} and a positive input scale, got {len}, {hidden}, {input_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CellParams::<f64>::init(CellKind::Atr, hidden, hidden, false, &mut rng);
    let mut state = CellState::zeros(CellKind::Atr, 1, hidden);
    let mut traces = Vec::with_capacity(len);
    let mut states = Vec::with_capacity(len);
    for _ in 0..len {
        let x = Tensor::uniform(&[1, hidden], -input_scale, input_scale, &mut rng);
        let (next, trace) = params.run_step(&state, &x)?;
        traces.push(trace);
        states.push(next.h.clone());
        state = next;
    }
    let r = rollout(&traces, None)?;
    let mean = |t: &Option<Tensor<f64>>| t.as_ref().map_or(f64::NAN, |g| g.data().iter().sum::<f64>() / hidden as f64);
    let weights = r.attribution.reduced();
    Ok(RolloutView {
        len,
        hidden,
        links: dependency_links(&weights),
        input_gate_mean: traces.iter().map(|t| mean(&t.input)).collect(),
        forget_gate_mean: traces.iter().map(|t| mean(&t.forget)).collect(),
        residual: r.max_residual(&states),
        weights,
    })
}

#[derive(Debug, Serialize)]
pub struct CellAudit {
    pub cell: &'static str,
    pub weights: Vec<&'static str>,
    pub param_count: usize,
    pub matmuls_per_step: u64,
    /// Parameters relative to ATR at the same sizes.
    pub param_ratio: f64,
}

/// Weight matrices, parameter counts and matrix products per step for every cell.
pub fn audit(input_dim: usize, hidden_dim: usize) -> atrseq::Result<Vec<CellAudit>> {
    if input_dim == 0 || hidden_dim == 0 || input_dim > MAX_DIM || hidden_dim > MAX_DIM {
        return Err(atrseq::Error::Config(format!("sizes must lie in 1..={MAX_DIM}, got {input_dim} and {hidden_dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let count = |kind, rng: &mut ChaCha8Rng| CellParams::<f32>::init(kind, input_dim, hidden_dim, false, rng).parameter_count();
    let atr = count(CellKind::Atr, &mut rng) as f64;
    CELLS
        .iter()
        .map(|&kind| {
            let param_count = count(kind, &mut rng);
            Ok(CellAudit {
                cell: kind.name(),
                weights: kind.weight_names(input_dim, hidden_dim),
                param_count,
                matmuls_per_step: count_step_matmuls_at(kind, input_dim, hidden_dim)?,
                param_ratio: param_count as f64 / atr,
            })
        })
        .collect()
}

fn to_js<T: Serialize>(r: atrseq::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = twinGateSurface)]
pub fn twin_gate_surface_js(lo: f64, hi: f64, resolution: usize) -> Result<String, JsError> {
    to_js(surface(lo, hi, resolution))
}

/// `seed` arrives as a JS number; integral values up to 2^53 are exact.
#[wasm_bindgen(js_name = rolloutAttribution)]
pub fn rollout_attribution_js(seed: f64, len: usize, hidden: usize, input_scale: f64) -> Result<String, JsError> {
    if !(seed >= 0.0 && seed.fract() == 0.0 && seed <= 9_007_199_254_740_992.0) {
        return Err(JsError::new("seed must be a non-negative integer"));
    }
    to_js(rollout_view(seed as u64, len, hidden, input_scale))
}

#[wasm_bindgen(js_name = cellAudit)]
pub fn cell_audit_js(input_dim: usize, hidden_dim: usize) -> Result<String, JsError> {
    to_js(audit(input_dim, hidden_dim))
}
