use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedule bounds, with ramp edges as fractions of the epoch budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lambda_sel_max: f64,
    pub ramp_start: f64,
    pub ramp_end: f64,
    pub lambda_min_start: f64,
    pub lambda_min_end: f64,
    /// Hold `λ_min` at its start value until the ramp begins, then anneal
    /// over the remaining epochs.
    pub lambda_min_selective_phase_only: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lambda_sel_max: 0.2,
            ramp_start: 0.5,
            ramp_end: 0.75,
            lambda_min_start: 0.5,
            lambda_min_end: 0.05,
            lambda_min_selective_phase_only: false,
        }
    }
}

/// A [`ScheduleConfig`] bound to an epoch budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    epochs: f64,
    e0: f64,
    e1: f64,
    cfg: ScheduleConfig,
}

impl Schedule {
    pub fn new(cfg: ScheduleConfig, epochs: usize) -> Result<Self> {
        let e = epochs as f64;
        let (e0, e1) = (cfg.ramp_start * e, cfg.ramp_end * e);
        if epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0 <= cfg.ramp_start && e0 < e1 && cfg.ramp_end <= 1.0) {
            return Err(Error::Config(format!(
                "ramp bounds need 0 <= e0 < e1 <= E, got e0={e0}, e1={e1}, E={e}"
            )));
        }
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(in_unit(cfg.lambda_min_start) && in_unit(cfg.lambda_min_end)) {
            return Err(Error::Config("lambda_min endpoints must lie in (0, 1)".into()));
        }
        if !(cfg.lambda_sel_max >= 0.0) {
            return Err(Error::Config("lambda_sel_max must be non-negative".into()));
        }
        Ok(Schedule { epochs: e, e0, e1, cfg })
    }

    pub fn epochs(&self) -> f64 {
        self.epochs
    }

    pub fn ramp_bounds(&self) -> (f64, f64) {
        (self.e0, self.e1)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.cfg
    }

    /// Cosine anneal from `lambda_min_start` at 0 to `lambda_min_end` at E.
    pub fn lambda_min(&self, e: f64) -> f64 {
        let (start, end) = (self.cfg.lambda_min_start, self.cfg.lambda_min_end);
        let (from, to) = if self.cfg.lambda_min_selective_phase_only {
            (self.e0, self.epochs)
        } else {
            (0.0, self.epochs)
        };
        if e <= from {
            return start;
        }
        if e >= to {
            return end;
        }
        let frac = (e - from) / (to - from);
        end + (start - end) * (1.0 + (PI * frac).cos()) / 2.0
    }

    /// 0 before e₀, linear to 1 at e₁, 1 after.
    pub fn ramp(&self, e: f64) -> f64 {
        if e < self.e0 {
            0.0
        } else if e >= self.e1 {
            1.0
        } else {
            (e - self.e0) / (self.e1 - self.e0)
        }
    }

    pub fn lambda_sel(&self, e: f64) -> f64 {
        if e >= self.e1 {
            self.cfg.lambda_sel_max
        } else {
            self.cfg.lambda_sel_max * self.ramp(e)
        }
    }
}
