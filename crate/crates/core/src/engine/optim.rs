use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov,
    /// Adam with a Nesterov-corrected first moment.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd_nesterov(0.9)
    }
}

impl OptimizerConfig {
    pub fn sgd_nesterov(momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdNesterov,
            momentum,
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::config("optimizer.beta2 must be in [0, 1) and eps positive"));
        }
        Ok(())
    }

    /// Optimizer state elements kept per parameter.
    pub fn state_per_param(&self) -> usize {
        match self.kind {
            OptimizerKind::SgdNesterov => 1,
            OptimizerKind::Adam => 2,
        }
    }
}

/// Single global optimizer state aligned with θ.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub velocity: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: usize) -> Self {
        let second = match config.kind {
            OptimizerKind::SgdNesterov => vec![],
            OptimizerKind::Adam => vec![0.0; params],
        };
        Self {
            config,
            velocity: vec![0.0; params],
            second_moment: second,
            steps: 0,
        }
    }

    /// `θ ← θ − OptUpdate(ḡ)` with the learning rate applied inside the update.
    ///
    /// SGD-Nesterov: `v ← μv + ḡ; θ ← θ − lr (ḡ + μv)`.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, step: usize) -> Result<()> {
        if theta.len() != self.velocity.len() || grad.len() != theta.len() {
            return Err(Error::Protocol("optimizer state does not match θ".into()));
        }
        if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                step,
                message: format!("aggregated gradient is {} at parameter {j}", grad[j]),
            });
        }
        let mu = self.config.momentum;
        self.steps += 1;
        match self.config.kind {
            OptimizerKind::SgdNesterov => {
                for ((t, v), &g) in theta.iter_mut().zip(&mut self.velocity).zip(grad) {
                    *v = mu * *v + g;
                    *t -= lr * (g + mu * *v);
                }
            }
            OptimizerKind::Adam => {
                let (b2, eps) = (self.config.beta2, self.config.eps);
                let t = self.steps as i32;
                let (c1, c1_prev, c2) = (1.0 - mu.powi(t + 1), 1.0 - mu.powi(t), 1.0 - b2.powi(t));
                for (((th, m), s), &g) in theta.iter_mut().zip(&mut self.velocity).zip(&mut self.second_moment).zip(grad) {
                    *m = mu * *m + (1.0 - mu) * g;
                    *s = b2 * *s + (1.0 - b2) * g * g;
                    let m_hat = mu * *m / c1 + (1.0 - mu) * g / c1_prev;
                    *th -= lr * m_hat / ((*s / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_keeps_theta_but_accumulates_momentum() {
        let mut s = OptimizerState::new(OptimizerConfig::default(), 2);
        let mut theta = vec![1.0, -1.0];
        s.update(&mut theta, &[0.5, 2.0], 0.0, 0).unwrap();
        assert_eq!(theta, vec![1.0, -1.0]);
        assert_eq!(s.velocity, vec![0.5, 2.0]);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut s = OptimizerState::new(OptimizerConfig::sgd_nesterov(0.0), 2);
        let mut theta = vec![1.0, -1.0];
        s.update(&mut theta, &[0.5, 2.0], 0.1, 0).unwrap();
        assert_eq!(theta, vec![1.0 - 0.1 * 0.5, -1.0 - 0.1 * 2.0]);
    }

    #[test]
    fn two_nesterov_steps_on_a_quadratic() {
        // L = a θ² / 2, so g = a θ.
        let (a, lr, mu) = (3.0, 0.05, 0.9);
        let mut s = OptimizerState::new(OptimizerConfig::sgd_nesterov(mu), 1);
        let mut theta = vec![2.0];
        let (mut t, mut v) = (2.0f64, 0.0f64);
        for step in 0..2 {
            let g = a * theta[0];
            s.update(&mut theta, &[g], lr, step).unwrap();
            let gh = a * t;
            v = mu * v + gh;
            t -= lr * (gh + mu * v);
        }
        assert!((theta[0] - t).abs() < 1e-15);
        // θ1 = 2 − 0.05 (6 + 5.4) = 1.43; g = 4.29, v = 9.69; θ2 = 1.43 − 0.05 (4.29 + 8.721)
        assert!((theta[0] - 0.77945).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_with_step() {
        let mut s = OptimizerState::new(OptimizerConfig::default(), 1);
        let err = s.update(&mut [0.0], &[f64::NAN], 0.1, 17).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: 17, .. }));
    }

    #[test]
    fn adam_first_step_matches_nesterov_bias_correction() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..OptimizerConfig::default()
        };
        let mut s = OptimizerState::new(cfg, 1);
        let mut theta = vec![0.0];
        s.update(&mut theta, &[0.3], 0.01, 0).unwrap();
        // m̂ = (1-μ)g/(1-μ²), step = lr (μ m̂ + (1-μ)g/(1-μ)) / |g|
        let want = -0.01 * (0.9 * 0.1 / 0.19 + 1.0);
        assert!((theta[0] - want).abs() < 1e-9, "{} vs {want}", theta[0]);
    }
}
