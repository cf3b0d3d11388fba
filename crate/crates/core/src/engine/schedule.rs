use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Multistep,
}

/// Learning-rate schedule over a fixed number of steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub lr_max: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default)]
    pub warmup_fraction: f64,
    /// Fractions of training at which multistep decays.
    #[serde(default)]
    pub milestones: Vec<f64>,
    #[serde(default = "default_decay")]
    pub decay: f64,
}

fn default_decay() -> f64 {
    0.1
}

impl Default for ScheduleSpec {
    /// Cosine annealing 0.2 → 0.002 with 5% linear warmup.
    fn default() -> Self {
        Self::cosine(0.2, 0.002, 0.05)
    }
}

impl ScheduleSpec {
    pub fn cosine(lr_max: f64, lr_min: f64, warmup_fraction: f64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            lr_max,
            lr_min,
            warmup_fraction,
            milestones: vec![],
            decay: 0.1,
        }
    }

    pub fn multistep(lr_max: f64, milestones: Vec<f64>) -> Self {
        Self {
            kind: ScheduleKind::Multistep,
            lr_max,
            lr_min: 0.0,
            warmup_fraction: 0.0,
            milestones,
            decay: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::config(format!(
                "schedule needs 0 <= lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("schedule.warmup_fraction must be in [0, 1)"));
        }
        if self.milestones.iter().any(|&m| !(m > 0.0 && m < 1.0)) || self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("schedule.milestones must be strictly increasing in (0, 1)"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("schedule.decay must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_fraction * total_steps as f64).floor() as usize
    }
}

/// Learning rate of step `step` (0-based) in a run of `total_steps` steps.
pub fn lr_at(schedule: &ScheduleSpec, step: usize, total_steps: usize) -> f64 {
    let warmup = schedule.warmup_steps(total_steps);
    if step < warmup {
        return schedule.lr_max * step as f64 / warmup as f64;
    }
    match schedule.kind {
        ScheduleKind::Cosine => {
            let span = total_steps.saturating_sub(1).saturating_sub(warmup);
            let progress = if span == 0 {
                1.0
            } else {
                ((step - warmup) as f64 / span as f64).min(1.0)
            };
            schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + (PI * progress).cos())
        }
        ScheduleKind::Multistep => {
            let progress = step as f64 / total_steps.max(1) as f64;
            let passed = schedule.milestones.iter().filter(|&&m| progress >= m).count();
            schedule.lr_max * schedule.decay.powi(passed as i32)
        }
    }
}

fn check_overlap(workers: usize, replication: usize) -> Result<()> {
    if replication == 0 || replication > workers {
        return Err(Error::config(format!(
            "overlap P={replication} must satisfy 1 <= P <= N={workers}"
        )));
    }
    Ok(())
}

/// `ceil(E_full * N / P)`: epochs giving every overlap the same total compute.
pub fn flop_matched_epochs(epochs_full: usize, workers: usize, replication: usize) -> Result<usize> {
    check_overlap(workers, replication)?;
    if epochs_full == 0 {
        return Err(Error::config("epochs_full must be at least 1"));
    }
    Ok((epochs_full * workers).div_ceil(replication))
}

/// Step-level version of [`flop_matched_epochs`].
pub fn flop_matched_steps(steps_full: usize, workers: usize, replication: usize) -> Result<usize> {
    check_overlap(workers, replication)?;
    Ok((steps_full * workers).div_ceil(replication))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = ScheduleSpec::default();
        let total = 1000;
        let w = s.warmup_steps(total);
        assert_eq!(w, 50);
        assert_eq!(lr_at(&s, 0, total), 0.0);
        assert!((lr_at(&s, 25, total) - 0.1).abs() < 1e-15);
        assert_eq!(lr_at(&s, w, total), 0.2);
        assert!((lr_at(&s, total - 1, total) - 0.002).abs() < 1e-9);
    }

    #[test]
    fn cosine_is_monotone_after_warmup() {
        let s = ScheduleSpec::default();
        let lrs: Vec<f64> = (50..400).map(|t| lr_at(&s, t, 400)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn multistep_decays_at_milestones() {
        let s = ScheduleSpec::multistep(0.2, vec![0.5, 0.75]);
        assert_eq!(lr_at(&s, 10, 100), 0.2);
        assert!((lr_at(&s, 60, 100) - 0.02).abs() < 1e-15);
        assert!((lr_at(&s, 80, 100) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn single_step_run_uses_the_floor() {
        let s = ScheduleSpec::cosine(0.2, 0.002, 0.0);
        assert_eq!(lr_at(&s, 0, 1), 0.002);
    }

    #[test]
    fn invalid_schedules() {
        assert!(ScheduleSpec::cosine(0.1, 0.2, 0.0).validate().is_err());
        assert!(ScheduleSpec::multistep(0.1, vec![0.7, 0.5]).validate().is_err());
        assert!(ScheduleSpec::multistep(0.1, vec![0.0]).validate().is_err());
    }

    #[test]
    fn flop_matching() {
        assert_eq!(flop_matched_epochs(200, 8, 4).unwrap(), 400);
        assert_eq!(flop_matched_epochs(200, 8, 3).unwrap(), 534);
        assert_eq!(flop_matched_epochs(7, 8, 8).unwrap(), 7);
        assert!(flop_matched_epochs(200, 8, 0).is_err());
        assert!(flop_matched_epochs(200, 8, 9).is_err());
        assert_eq!(flop_matched_steps(125, 8, 6).unwrap(), 167);
    }
}
