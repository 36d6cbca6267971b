//! Browser bindings for the demo page. Every function returns a JSON string
//! so the page needs no generated type definitions.

use mcp_core::inference::EngineConfig;
use mcp_core::io::{run_engine, SynthSpec, SynthStream};
use mcp_core::math::affinity;
use mcp_core::metrics::{fig2_experiment, Fig2Config};
use mcp_core::{Engine, Mode};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn error_json(e: impl std::fmt::Display) -> String {
    json!({ "error": e.to_string() }).to_string()
}

/// `A(x) = α·exp(−β(1 − x))` sampled at `points` values of `x` in [−1, 1].
#[wasm_bindgen]
pub fn affinity_curve(alpha: f64, beta: f64, points: usize) -> String {
    let n = points.max(2);
    let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| affinity(x, alpha, beta)).collect();
    json!({ "x": xs, "y": ys }).to_string()
}

/// Stream a synthetic shift dataset through the engine and report the
/// running accuracy of the adapted and the zero-shot predictions.
#[wasm_bindgen]
pub fn run_synthetic(spread: f64, shift: f64, samples: usize, seed: u64, tuned: bool) -> String {
    let spec = SynthSpec {
        spread,
        shift,
        samples,
        views: if tuned { 8 } else { 1 },
        seed,
        ..SynthSpec::default()
    };
    let stream = match SynthStream::new(&spec) {
        Ok(s) => s,
        Err(e) => return error_json(e),
    };
    let cfg = EngineConfig {
        mode: if tuned { Mode::McpPlusPlus } else { Mode::Mcp },
        ..EngineConfig::default()
    };
    let mut engine = match Engine::from_prompts(&stream.header().prompts, cfg) {
        Ok(e) => e,
        Err(e) => return error_json(e),
    };
    let mut log = Vec::new();
    let outcome = run_engine(&mut engine, stream, Some(&mut log));
    if let Some(e) = outcome.error {
        return error_json(e);
    }
    let (mut adapted, mut zero_shot) = (Vec::new(), Vec::new());
    let (mut hits, mut zs_hits) = (0usize, 0usize);
    for (i, line) in log.split(|&b| b == b'\n').filter(|l| !l.is_empty()).enumerate() {
        let entry: mcp_core::io::SampleLog = match serde_json::from_slice(line) {
            Ok(e) => e,
            Err(e) => return error_json(e),
        };
        if let Some(l) = entry.label {
            hits += usize::from(entry.pred == l);
            zs_hits += usize::from(entry.zero_shot_pred == l);
        }
        adapted.push(100.0 * hits as f64 / (i + 1) as f64);
        zero_shot.push(100.0 * zs_hits as f64 / (i + 1) as f64);
    }
    json!({
        "adapted": adapted,
        "zero_shot": zero_shot,
        "summary": outcome.summary,
    })
    .to_string()
}

/// Compactness against accuracy gain over the eight-dataset spread sweep.
#[wasm_bindgen]
pub fn compactness_sweep(seed: u64) -> String {
    match fig2_experiment(&Fig2Config::spread_sweep(seed)) {
        Ok(report) => serde_json::to_string(&report).unwrap_or_else(error_json),
        Err(e) => error_json(e),
    }
}
