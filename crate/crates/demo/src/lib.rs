//! WebAssembly bindings for the demo page. Each export is a thin wrapper
//! over a plain function so the logic can be tested natively.

use spikegate::block::{build_attention_mask, half_life};
use spikegate::energy::{energy_per_token, op_counts, ratio, to_microjoules, DenseBaseline, EnergyConstants, Regime};
use spikegate::lif::{lif_sequence, LifConfig, LifState};
use spikegate::{BinaryTensor, ModelConfig, Tensor};
use wasm_bindgen::prelude::*;

/// Drives one neuron with `inputs` and returns `[u_0, s_0, u_1, s_1, …]`:
/// the clamped pre-reset potential and the spike at every step.
pub fn lif_trace_values(inputs: &[f64], beta: f64, theta: f64) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(format!("beta {beta} outside [0, 1]"));
    }
    let cfg = LifConfig {
        beta,
        theta,
        ..LifConfig::default()
    };
    let x = Tensor::new(vec![inputs.len(), 1], inputs.to_vec()).map_err(|e| e.to_string())?;
    let out = lif_sequence(&cfg, &x, &LifState::zeros(1, 1), inputs.len().max(1)).map_err(|e| e.to_string())?;
    Ok(out
        .trajectory
        .u
        .iter()
        .zip(out.spikes.data())
        .flat_map(|(&u, &s)| [u, s as f64])
        .collect())
}

/// Row-major `[S × S]` grid: 1 where query `i` may attend to key `j`.
pub fn attention_grid(seq_len: usize, window: usize, n_global: usize, spikes: &[u8]) -> Result<Vec<u8>, String> {
    if window == 0 {
        return Err("window must be at least 1".into());
    }
    let m = BinaryTensor::new(vec![seq_len], spikes.to_vec()).map_err(|e| e.to_string())?;
    let mask = build_attention_mask::<f64>(seq_len, window, n_global, &m).map_err(|e| e.to_string())?;
    Ok(mask.data().iter().map(|&x| (x == 0.0) as u8).collect())
}

/// `points` rows of `[sparsity, model μJ, baseline μJ, ratio]` for the
/// reference configuration, in the requested regime.
pub fn energy_rows(points: usize, dense_accelerator: bool) -> Result<Vec<f64>, String> {
    if points < 2 {
        return Err("need at least two points".into());
    }
    let regime = if dense_accelerator { Regime::DenseAccelerator } else { Regime::Neuromorphic };
    let k = EnergyConstants::default();
    let counts = op_counts(&ModelConfig::reference());
    let base = DenseBaseline::gpt2_201m().energy(&k, regime);
    let mut out = Vec::with_capacity(points * 4);
    for i in 0..points {
        let s = i as f64 / (points - 1) as f64;
        let model = energy_per_token(&counts, &k, regime, s).map_err(|e| e.to_string())?;
        out.extend([
            s,
            to_microjoules(model.total()),
            to_microjoules(base.total()),
            ratio(&model, &base).map_err(|e| e.to_string())?,
        ]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn lif_trace(inputs: &[f64], beta: f64, theta: f64) -> Result<Vec<f64>, JsError> {
    lif_trace_values(inputs, beta, theta).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attention_mask(seq_len: usize, window: usize, n_global: usize, spikes: &[u8]) -> Result<Vec<u8>, JsError> {
    attention_grid(seq_len, window, n_global, spikes).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn energy_curve(points: usize, dense_accelerator: bool) -> Result<Vec<f64>, JsError> {
    energy_rows(points, dense_accelerator).map_err(|e| JsError::new(&e))
}

/// Tokens for a decay factor to halve a contribution.
#[wasm_bindgen]
pub fn decay_half_life(alpha: f64) -> f64 {
    half_life(alpha)
}
