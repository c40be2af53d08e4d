//! WebAssembly bindings for the browser demo.
//!
//! Each export returns a JSON string so the page needs no generated glue
//! beyond `wasm-bindgen`. The `*_json` functions hold the logic and run
//! natively in tests.

use hybridcast::dataio::{synth_series, SynthKind, SynthSpec};
use hybridcast::decomp::{decompose as decompose_series, dft, freq_seasonal, top_frequencies, EmaConfig};
use hybridcast::gating::{balance_loss, topk_gate_from_logits};
use hybridcast::ndgrad::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn json(v: &impl Serialize) -> Out {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn series(values: &[f64]) -> Result<Tensor, String> {
    if values.is_empty() {
        return Err("series is empty".into());
    }
    Tensor::new([1, values.len()], values.to_vec()).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Decomposition {
    trend_ema: Vec<f64>,
    seasonal_ema: Vec<f64>,
    seasonal_freq: Vec<f64>,
    trend_multi_kernel: Vec<f64>,
}

pub fn decompose_json(values: &[f64], alpha: f64, k_freq: usize, kernels: &[usize]) -> Out {
    let x = series(values)?;
    let cfg = EmaConfig::new(alpha).map_err(|e| e.to_string())?;
    let d = decompose_series(&x, cfg, k_freq, kernels).map_err(|e| e.to_string())?;
    json(&Decomposition {
        trend_ema: d.trend_ema.into_data(),
        seasonal_ema: d.seasonal_ema.into_data(),
        seasonal_freq: d.seasonal_freq.into_data(),
        trend_multi_kernel: d.trend_freq_input.into_data(),
    })
}

#[derive(Serialize)]
struct SpectrumView {
    /// Bins `0..=L/2`.
    amplitudes: Vec<f64>,
    top: Vec<usize>,
    reconstruction: Vec<f64>,
}

pub fn spectrum_json(values: &[f64], k: usize) -> Out {
    let x = series(values)?;
    let reconstruction = freq_seasonal(&x, k).map_err(|e| e.to_string())?.into_data();
    let mut amplitudes = dft(&x).amplitudes(0);
    let top = top_frequencies(&amplitudes, k);
    amplitudes.truncate(values.len() / 2 + 1);
    json(&SpectrumView { amplitudes, top, reconstruction })
}

#[derive(Serialize)]
struct GateView {
    /// Row-major `[rows, experts]`.
    gates: Vec<f64>,
    topk: Vec<Vec<usize>>,
    load: Vec<f64>,
    gate_sums: Vec<f64>,
    balance: f64,
}

pub fn gate_json(logits: &[f64], experts: usize, k: usize) -> Out {
    if experts == 0 || logits.is_empty() || !logits.len().is_multiple_of(experts) {
        return Err(format!("{} logits do not split into rows of {experts}", logits.len()));
    }
    let t = Tensor::new([logits.len() / experts, experts], logits.to_vec()).map_err(|e| e.to_string())?;
    let d = topk_gate_from_logits(&t, &t, k).map_err(|e| e.to_string())?;
    json(&GateView {
        balance: balance_loss(&d),
        gate_sums: d.gate_sums(),
        topk: d.topk_indices,
        load: d.load,
        gates: d.gates.into_data(),
    })
}

pub fn synth_values(kind: &str, n: usize, period: f64, slope: f64, noise: f64, seed: u64) -> Result<Vec<f64>, String> {
    let kind: SynthKind = kind.parse().map_err(|e: hybridcast::Error| e.to_string())?;
    let spec = SynthSpec { kind, period, slope, noise };
    Ok(synth_series(spec, 1, n, seed).map_err(|e| e.to_string())?.channel(0))
}

fn js(r: Out) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// EMA and frequency decomposition of one series.
#[wasm_bindgen]
pub fn decompose(values: &[f64], alpha: f64, k_freq: usize, kernels: &[u32]) -> Result<String, JsError> {
    let kernels: Vec<usize> = kernels.iter().map(|&k| k as usize).collect();
    js(decompose_json(values, alpha, k_freq, &kernels))
}

/// Amplitude spectrum, top-k bins and their reconstruction.
#[wasm_bindgen]
pub fn spectrum(values: &[f64], k: usize) -> Result<String, JsError> {
    js(spectrum_json(values, k))
}

/// Top-k gating over row-major logits.
#[wasm_bindgen]
pub fn gate(logits: &[f64], experts: usize, k: usize) -> Result<String, JsError> {
    js(gate_json(logits, experts, k))
}

/// One synthetic channel. `seed` is a JS number truncated to an integer.
#[wasm_bindgen]
pub fn synth(kind: &str, n: usize, period: f64, slope: f64, noise: f64, seed: f64) -> Result<Vec<f64>, JsError> {
    synth_values(kind, n, period, slope, noise, seed as u64).map_err(|e| JsError::new(&e))
}
