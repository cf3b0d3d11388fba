use crate::error::{Error, Result};
use crate::masking::WorkerMask;

/// Masked average of the worker gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedGradient {
    pub values: Vec<f64>,
    /// `Σ_i m_ij` for every parameter `j`.
    pub divisor: Vec<u32>,
}

/// `ḡ_j = Σ_i m_ij g_ij / Σ_i m_ij`, reduced in ascending worker order.
pub fn aggregate(grads: &[Vec<f64>], masks: &[WorkerMask]) -> Result<AggregatedGradient> {
    if grads.len() != masks.len() || grads.is_empty() {
        return Err(Error::Protocol(format!(
            "{} gradients for {} worker masks",
            grads.len(),
            masks.len()
        )));
    }
    let d = masks[0].param_mask.len();
    if grads.iter().any(|g| g.len() != d) || masks.iter().any(|m| m.param_mask.len() != d) {
        return Err(Error::Protocol("gradient and mask lengths differ".into()));
    }
    let mut values = vec![0.0; d];
    let mut divisor = vec![0u32; d];
    for (g, m) in grads.iter().zip(masks) {
        for j in 0..d {
            // Entries outside the mask are skipped rather than multiplied by
            // zero, so garbage there cannot leak in as NaN.
            if m.param_mask[j] {
                values[j] += g[j];
                divisor[j] += 1;
            }
        }
    }
    for j in 0..d {
        if divisor[j] == 0 {
            return Err(Error::Protocol(format!("parameter {j} is not covered by any worker")));
        }
        values[j] /= divisor[j] as f64;
    }
    Ok(AggregatedGradient { values, divisor })
}
