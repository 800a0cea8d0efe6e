//! The two fixed scalar schedules: the velocity-rescaling decay `c(γ)` used
//! by the training target, and the per-step learning-rate table used by
//! refinement at inference time.
//!
//! The decay is a truncated linear ramp: constant at `scale` until the onset,
//! then linear to exactly zero at `γ = 1`. Because `c(1) = 0`, expert chunks
//! are stationary points of the trained field. For `γ > onset` the ratio
//! `c(γ)/(1-γ)` is the constant `scale/(1-onset)`, which is what makes the
//! near-attractor slope of the ideal field a single number.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Velocity-rescaling decay: `scale` on `[0, onset]`, linear to 0 at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecaySchedule {
    pub scale: f64,
    pub onset: f64,
}

impl Default for DecaySchedule {
    fn default() -> Self {
        DecaySchedule {
            scale: 4.0,
            onset: 0.1,
        }
    }
}

impl DecaySchedule {
    pub fn new(scale: f64, onset: f64) -> Result<Self> {
        let s = DecaySchedule { scale, onset };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::config("decay scale must be a positive finite real"));
        }
        if !(0.0..1.0).contains(&self.onset) {
            return Err(Error::config("decay onset must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Constant slope of the ideal field past the onset: `scale / (1 - onset)`.
    pub fn attractor_slope(&self) -> f64 {
        self.scale / (1.0 - self.onset)
    }
}

/// Evaluates the decay at `γ ∈ [0, 1]`.
pub fn c_of_gamma(gamma: f64, sched: &DecaySchedule) -> Result<f64> {
    sched.validate()?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!(
            "gamma {gamma} outside [0, 1]"
        )));
    }
    if gamma <= sched.onset {
        Ok(sched.scale)
    } else {
        Ok(sched.scale * (1.0 - gamma) / (1.0 - sched.onset))
    }
}

/// One contiguous range of refinement steps sharing a learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRange {
    /// First step of the range, 1-based, inclusive.
    pub from: usize,
    /// Last step of the range, inclusive.
    pub to: usize,
    pub eta: f64,
}

/// Fixed per-step learning-rate schedule for refinement updates.
///
/// Steps beyond the last range clamp to the final rate, so the refinement
/// budget can be raised without redefining the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSizeTable {
    pub ranges: Vec<StepRange>,
}

impl Default for StepSizeTable {
    /// η₁ = 0.1, η₂..₄ = 0.05, η₅..₁₆ = 0.02, η₁₇..₃₀ = 0.01.
    fn default() -> Self {
        StepSizeTable {
            ranges: vec![
                StepRange { from: 1, to: 1, eta: 0.1 },
                StepRange { from: 2, to: 4, eta: 0.05 },
                StepRange { from: 5, to: 16, eta: 0.02 },
                StepRange { from: 17, to: 30, eta: 0.01 },
            ],
        }
    }
}

impl StepSizeTable {
    /// Single-rate table: every step uses `eta`.
    pub fn constant(eta: f64) -> Result<Self> {
        let t = StepSizeTable {
            ranges: vec![StepRange { from: 1, to: 1, eta }],
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(Error::config("step-size table is empty"));
        }
        let mut expected_from = 1;
        for r in &self.ranges {
            if r.from != expected_from {
                return Err(Error::config(format!(
                    "step ranges must be contiguous from 1: found range starting at {} where {} was expected",
                    r.from, expected_from
                )));
            }
            if r.to < r.from {
                return Err(Error::config("step range end precedes its start"));
            }
            if !r.eta.is_finite() || r.eta <= 0.0 {
                return Err(Error::config("step sizes must be positive finite reals"));
            }
            expected_from = r.to + 1;
        }
        Ok(())
    }
}

/// Learning rate for the k-th executed update (1-based). Steps past the table
/// clamp to the last range.
pub fn eta_of_step(k: usize, table: &StepSizeTable) -> Result<f64> {
    table.validate()?;
    if k == 0 {
        return Err(Error::config("step index is 1-based; got 0"));
    }
    for r in &table.ranges {
        if k >= r.from && k <= r.to {
            return Ok(r.eta);
        }
    }
    Ok(table.ranges.last().unwrap().eta)
}
