//! Group normalization restricted to a set of active channels.
//!
//! Statistics for each (sample, group) pair are taken over the active
//! channels of that group only. Inactive channels produce exact zeros and
//! receive zero gradient.

/// Epsilon added to the variance before the square root.
pub const GROUP_NORM_EPS: f64 = 1e-5;

pub struct GroupNormForward {
    pub out: Vec<f64>,
    /// Normalized input, zero on inactive channels.
    pub normalized: Vec<f64>,
    /// `1 / sqrt(var + eps)` per (sample, group); zero for groups with no active channel.
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct NormLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
    pub groups: usize,
}

impl NormLayout {
    fn group_size(&self) -> usize {
        self.channels / self.groups
    }
}

pub fn group_norm_forward(
    layout: NormLayout,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    active: &[bool],
    eps: f64,
) -> GroupNormForward {
    let NormLayout {
        batch,
        channels,
        spatial,
        groups,
    } = layout;
    let cg = layout.group_size();
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; batch * groups];
    for b in 0..batch {
        for g in 0..groups {
            let chans = (g * cg..(g + 1) * cg).filter(|&c| active[c]);
            let count = chans.clone().count();
            if count == 0 {
                continue;
            }
            let n = (count * spatial) as f64;
            let mut sum = 0.0;
            for c in chans.clone() {
                sum += x[(b * channels + c) * spatial..][..spatial].iter().sum::<f64>();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for c in chans.clone() {
                for v in &x[(b * channels + c) * spatial..][..spatial] {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            let inv = 1.0 / (sq / n + eps).sqrt();
            inv_std[b * groups + g] = inv;
            for c in chans {
                let off = (b * channels + c) * spatial;
                for i in off..off + spatial {
                    let xh = (x[i] - mean) * inv;
                    normalized[i] = xh;
                    out[i] = gamma[c] * xh + beta[c];
                }
            }
        }
    }
    GroupNormForward {
        out,
        normalized,
        inv_std,
    }
}

pub struct GroupNormGrads {
    pub x: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn group_norm_backward(
    layout: NormLayout,
    gamma: &[f64],
    active: &[bool],
    normalized: &[f64],
    inv_std: &[f64],
    grad_out: &[f64],
) -> GroupNormGrads {
    let NormLayout {
        batch,
        channels,
        spatial,
        groups,
    } = layout;
    let cg = layout.group_size();
    let mut dx = vec![0.0; grad_out.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for b in 0..batch {
        for g in 0..groups {
            let chans = (g * cg..(g + 1) * cg).filter(|&c| active[c]);
            let count = chans.clone().count();
            if count == 0 {
                continue;
            }
            let n = (count * spatial) as f64;
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for c in chans.clone() {
                let off = (b * channels + c) * spatial;
                for i in off..off + spatial {
                    let dy = grad_out[i];
                    dgamma[c] += dy * normalized[i];
                    dbeta[c] += dy;
                    let dxh = dy * gamma[c];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * normalized[i];
                }
            }
            mean_dxh /= n;
            mean_dxh_xh /= n;
            let inv = inv_std[b * groups + g];
            for c in chans {
                let off = (b * channels + c) * spatial;
                for i in off..off + spatial {
                    let dxh = grad_out[i] * gamma[c];
                    dx[i] = inv * (dxh - mean_dxh - normalized[i] * mean_dxh_xh);
                }
            }
        }
    }
    GroupNormGrads {
        x: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}
