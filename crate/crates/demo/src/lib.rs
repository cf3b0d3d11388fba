//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every function returns JSON so the page needs no generated type glue.

use serde_json::json;
use subnetdp::diagnostics::memory_report;
use subnetdp::engine::{lr_at, ScheduleSpec};
use subnetdp::masking::{MaskAssignment, Strategy, StructuralUnit};
use subnetdp::model::ModelSpec;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn strategy(name: &str) -> Result<Strategy, JsError> {
    name.parse().map_err(js_err)
}

fn assignment(
    strategy_name: &str,
    workers: usize,
    overlap: usize,
    channels: usize,
    blocks: usize,
    seed: u64,
) -> Result<(subnetdp::model::ModelTopology, MaskAssignment), JsError> {
    let topology = ModelSpec::mini_resnet(channels, blocks, 10, 2).topology().map_err(js_err)?;
    let a = MaskAssignment::assign(&topology, strategy(strategy_name)?, workers, overlap, seed).map_err(js_err)?;
    Ok((topology, a))
}

/// Learning rate at every step `0..total_steps`. `kind` is `cosine` or
/// `multistep` (milestones at 50% and 75%).
pub fn schedule_curve(kind: &str, lr_max: f64, lr_min: f64, warmup_fraction: f64, total_steps: usize) -> Result<Vec<f64>, String> {
    let spec = match kind {
        "cosine" => ScheduleSpec::cosine(lr_max, lr_min, warmup_fraction),
        "multistep" => ScheduleSpec::multistep(lr_max, vec![0.5, 0.75]),
        other => return Err(format!("unknown schedule {other:?}")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok((0..total_steps).map(|s| lr_at(&spec, s, total_steps)).collect())
}

#[wasm_bindgen]
pub fn lr_curve(kind: &str, lr_max: f64, lr_min: f64, warmup_fraction: f64, total_steps: usize) -> Result<Vec<f64>, JsError> {
    schedule_curve(kind, lr_max, lr_min, warmup_fraction, total_steps).map_err(|e| JsError::new(&e))
}

/// Unit-by-worker membership of a mini-resnet assignment:
/// `{"units": [...], "workers": N, "grid": [[bool; N]; units]}`.
#[wasm_bindgen]
pub fn mask_grid(strategy: &str, workers: usize, overlap: usize, channels: usize, blocks: usize, seed: u64) -> Result<String, JsError> {
    let (_, a) = assignment(strategy, workers, overlap, channels, blocks, seed)?;
    let mut labels = Vec::new();
    let mut grid = Vec::new();
    for (unit, holders) in a.units() {
        labels.push(match unit {
            StructuralUnit::Channel { layer, index } => format!("{layer}[{index}]"),
            StructuralUnit::Block { block } => block.clone(),
        });
        grid.push((0..workers).map(|w| holders.contains(&w)).collect::<Vec<_>>());
    }
    Ok(json!({ "units": labels, "workers": workers, "grid": grid }).to_string())
}

/// Memory report of a mini-resnet assignment with SGD-momentum state.
#[wasm_bindgen]
pub fn memory_fractions(strategy: &str, workers: usize, overlap: usize, channels: usize, blocks: usize, seed: u64) -> Result<String, JsError> {
    let (topology, a) = assignment(strategy, workers, overlap, channels, blocks, seed)?;
    serde_json::to_string(&memory_report(&topology, &a, 1)).map_err(js_err)
}
