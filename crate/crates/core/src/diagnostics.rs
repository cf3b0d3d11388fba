//! Gradient alignment and per-worker memory accounting.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::masking::{MaskAssignment, Strategy, WorkerMask};
use crate::model::{Batch, GlobalModel, ModelTopology};

/// Cosine similarity, `None` when either vector has zero norm. Clamped to
/// [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Alignment of one layer for one worker.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerAlignment {
    pub layer: String,
    pub cosine: Option<f64>,
    /// Why `cosine` is absent.
    pub reason: Option<String>,
}

/// Cosine between masked and unmasked gradients of `layer`, restricted to
/// the support of `mask`.
pub fn restricted_alignment(
    topology: &ModelTopology,
    layer: &str,
    mask: &WorkerMask,
    g_mask: &[f64],
    g_unmask: &[f64],
) -> Result<LayerAlignment> {
    let li = topology
        .layer_index(layer)
        .ok_or_else(|| Error::config(format!("alignment layer {layer} is not in the model")))?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for &pi in &topology.layers[li].params {
        for j in topology.params[pi].range() {
            if mask.param_mask[j] {
                a.push(g_mask[j]);
                b.push(g_unmask[j]);
            }
        }
    }
    let (cosine, reason) = if a.is_empty() {
        (None, Some("layer is masked out on this worker".to_string()))
    } else {
        match cosine(&a, &b) {
            Some(c) => (Some(c), None),
            None => (None, Some("zero-norm restricted gradient".to_string())),
        }
    };
    Ok(LayerAlignment {
        layer: layer.to_string(),
        cosine,
        reason,
    })
}

/// Masked vs unmasked gradient alignment on the same batch at the current θ.
pub fn gradient_alignment(model: &GlobalModel, mask: &WorkerMask, batch: &Batch, layers: &[String]) -> Result<Vec<LayerAlignment>> {
    let (_, g_mask) = model.loss_and_gradient(mask, batch)?;
    let (_, g_unmask) = model.loss_and_gradient(&WorkerMask::full(&model.topology), batch)?;
    layers
        .iter()
        .map(|l| restricted_alignment(&model.topology, l, mask, &g_mask, &g_unmask))
        .collect()
}

/// One row of the alignment CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentSample {
    pub step: usize,
    pub worker: usize,
    pub layer: String,
    pub strategy: Strategy,
    /// P / N.
    pub overlap: f64,
    pub cosine: Option<f64>,
    pub reason: Option<String>,
}

pub const ALIGNMENT_CSV_HEADER: &str = "step,worker,layer,strategy,overlap,cosine";

impl AlignmentSample {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.worker,
            self.layer,
            self.strategy,
            self.overlap,
            self.cosine.map_or("NA".to_string(), |c| c.to_string())
        )
    }
}

/// Mean of the present cosines, `None` if all are absent.
pub fn mean_present(samples: &[AlignmentSample]) -> Option<f64> {
    let vals: Vec<f64> = samples.iter().filter_map(|s| s.cosine).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkerMemory {
    pub worker: usize,
    pub active_params: usize,
    pub active_fraction: f64,
    pub optimizer_state_elements: usize,
    /// Activation elements per sample of the full forward pass.
    pub activations_full: usize,
    /// Activation elements per sample as executed by this worker.
    pub activations_active: usize,
    /// `1 - active_fraction`; applies to parameters, gradients and optimizer state.
    pub param_savings: f64,
    pub activation_savings: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub strategy: Strategy,
    pub workers: usize,
    pub replication: usize,
    pub total_params: usize,
    pub maskable_params: usize,
    pub per_worker: Vec<WorkerMemory>,
    pub mean_active_fraction: f64,
    pub mean_param_savings: f64,
    pub mean_activation_savings: f64,
}

/// Analytic memory accounting of an assignment. Dropped blocks save their
/// activations; masked channels are still materialized (as zeros) and save
/// none.
pub fn memory_report(topology: &ModelTopology, assignment: &MaskAssignment, state_per_param: usize) -> MemoryReport {
    let total = topology.num_params();
    let full_acts = topology.activations_per_sample();
    let per_worker: Vec<WorkerMemory> = assignment
        .masks()
        .iter()
        .enumerate()
        .map(|(worker, m)| {
            let active = m.active_params();
            let dropped: usize = topology
                .blocks
                .iter()
                .zip(&m.block_active)
                .filter(|(_, &z)| !z)
                .map(|(b, _)| b.activations_per_sample)
                .sum();
            let active_fraction = active as f64 / total as f64;
            let activations_active = full_acts - dropped;
            WorkerMemory {
                worker,
                active_params: active,
                active_fraction,
                optimizer_state_elements: active * state_per_param,
                activations_full: full_acts,
                activations_active,
                param_savings: 1.0 - active_fraction,
                activation_savings: 1.0 - activations_active as f64 / full_acts.max(1) as f64,
            }
        })
        .collect();
    let mean = |f: fn(&WorkerMemory) -> f64| per_worker.iter().map(f).sum::<f64>() / per_worker.len() as f64;
    MemoryReport {
        strategy: assignment.strategy,
        workers: assignment.workers,
        replication: assignment.replication,
        total_params: total,
        maskable_params: assignment.maskable_params(topology).iter().filter(|&&m| m).count(),
        mean_active_fraction: mean(|w| w.active_fraction),
        mean_param_savings: mean(|w| w.param_savings),
        mean_activation_savings: mean(|w| w.activation_savings),
        per_worker,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_special_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn full_replication_saves_nothing() {
        let top = ModelTopology::block_stack(8, 10, 0);
        let a = MaskAssignment::full(&top, Strategy::Block, 8).unwrap();
        let r = memory_report(&top, &a, 1);
        assert!(r.per_worker.iter().all(|w| w.param_savings == 0.0 && w.activation_savings == 0.0));
    }

    #[test]
    fn absent_values_print_as_na() {
        let s = AlignmentSample {
            step: 3,
            worker: 1,
            layer: "block3.conv2".into(),
            strategy: Strategy::Block,
            overlap: 0.375,
            cosine: None,
            reason: Some("layer is masked out on this worker".into()),
        };
        assert_eq!(s.csv_row(), "3,1,block3.conv2,block,0.375,NA");
    }
}
