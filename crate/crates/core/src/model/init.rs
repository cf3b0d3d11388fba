use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelTopology, ParamKind};
use crate::error::{Error, Result};
use crate::masking::MaskAssignment;

/// `round(fan_out * mean_i(active outputs of worker i) / outputs)`, at least 1.
pub fn active_fan_out(topology: &ModelTopology, assignment: &MaskAssignment, layer: usize) -> usize {
    let info = &topology.layers[layer];
    let fan_out = info.fan_out.max(1);
    if info.out_channels == 0 || assignment.workers == 0 {
        return fan_out;
    }
    let active: usize = assignment
        .masks()
        .iter()
        .map(|m| match m.channels(layer) {
            Some(c) => c.iter().filter(|&&a| a).count(),
            None => info.out_channels,
        })
        .sum();
    let ratio = active as f64 / (assignment.workers * info.out_channels) as f64;
    ((fan_out as f64 * ratio).round() as usize).max(1)
}

/// Kaiming fan-out initialization with the fan-out counted over active
/// output units. Weights ~ N(0, 2 / fan_out_active); biases and norm shifts
/// are 0, norm scales 1.
pub fn masked_kaiming_init(topology: &ModelTopology, assignment: &MaskAssignment, seed: u64) -> Result<Vec<f64>> {
    if assignment.masks().iter().any(|m| m.param_mask.len() != topology.num_params()) {
        return Err(Error::config("mask assignment was built for a different topology"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; topology.num_params()];
    for p in &topology.params {
        let dst = &mut theta[p.range()];
        match p.kind {
            ParamKind::Weight => {
                let fan = active_fan_out(topology, assignment, p.layer);
                let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("positive std");
                for v in dst.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
            ParamKind::NormScale => dst.fill(1.0),
            ParamKind::Bias | ParamKind::NormShift => {}
        }
    }
    Ok(theta)
}
