//! Optimization-based action synthesis with adaptive early exit.
//!
//! A planning call starts from a Gaussian draw and performs gradient-style
//! updates `a ← a - η_k f(a, s)` against the stationary field. The field norm
//! is checked before every update: once it falls below the tolerance the loop
//! exits, so simple conditions spend fewer evaluations than hard ones. There
//! is no step-budget normalization — the step sizes are whatever the table
//! says, and their sum is unconstrained.
//!
//! The recorded residual norms are the raw material for anomaly scoring; the
//! number of field evaluations (NFE) is the efficiency metric reported by the
//! rollout summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{eval_field, l2_norm, ActionChunk};
use crate::net::FieldParams;
use crate::rng::{normal_vec, rng_from_seed, Rng};
use crate::schedule::{eta_of_step, StepSizeTable};

/// Settings for one refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Refinement budget (checks); the policy default is 30, anomaly-scoring
    /// runs use 10.
    pub k_max: usize,
    /// Norm tolerance for the early exit.
    pub tau_opt: f64,
    pub step_table: StepSizeTable,
    pub init: InitDist,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            k_max: 30,
            tau_opt: 0.4,
            step_table: StepSizeTable::default(),
            init: InitDist::Gaussian,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::config("refinement budget must be >= 1"));
        }
        if self.tau_opt.is_nan() || self.tau_opt < 0.0 {
            return Err(Error::config("stopping tolerance must be >= 0"));
        }
        self.step_table.validate()
    }
}

/// Initialization distribution for the first iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitDist {
    #[default]
    Gaussian,
}

/// Why a refinement run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Converged,
    Budget,
}

/// Everything observable about one planning call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    /// `‖f(a_k, s)‖₂` for each evaluated iterate, in order.
    pub residuals: Vec<f64>,
    /// Field evaluations made; always equals `residuals.len()`.
    pub nfe: usize,
    /// Updates applied (`nfe - 1` when converged, `k_max` at budget).
    pub updates: usize,
    pub stop_reason: StopReason,
    /// Final chunk, in the space the field operates in.
    pub chunk: ActionChunk,
    /// Set when the field produced a non-finite output; the trace then holds
    /// the last finite iterate.
    pub fault: Option<String>,
}

/// Anything that evaluates a stationary velocity over `(chunk, condition)`.
///
/// Implemented by trained networks and by the stub fields the tests use.
pub trait VelocityField {
    fn chunk_dim(&self) -> usize;
    fn eval(&self, x: &[f64], s: &[f64]) -> Result<Vec<f64>>;
}

/// A trained network viewed as a velocity field.
pub struct NetField<'a> {
    params: &'a FieldParams,
    cond_dim: usize,
}

impl<'a> NetField<'a> {
    pub fn new(params: &'a FieldParams, cond_dim: usize) -> Result<Self> {
        let chunk_dim = params.output_dim();
        if params.input_dim() != chunk_dim + cond_dim {
            return Err(Error::DimMismatch {
                what: "stationary field network input",
                expected: chunk_dim + cond_dim,
                got: params.input_dim(),
            });
        }
        Ok(NetField { params, cond_dim })
    }
}

impl VelocityField for NetField<'_> {
    fn chunk_dim(&self) -> usize {
        self.params.output_dim()
    }

    fn eval(&self, x: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.cond_dim {
            return Err(Error::DimMismatch {
                what: "condition",
                expected: self.cond_dim,
                got: s.len(),
            });
        }
        eval_field(self.params, x, s)
    }
}

/// One planning call: iterate, check, update. The norm check precedes the
/// update, so a converged run reports one more evaluation than it applied
/// updates.
pub fn refine<F: VelocityField + ?Sized>(
    field: &F,
    s: &[f64],
    cfg: &InferConfig,
    rng: &mut Rng,
) -> Result<(ActionChunk, InferenceTrace)> {
    cfg.validate()?;
    let mut chunk = match cfg.init {
        InitDist::Gaussian => normal_vec(rng, field.chunk_dim()),
    };
    let mut residuals = Vec::new();
    let mut updates = 0;
    let mut stop_reason = StopReason::Budget;
    let mut fault = None;
    for k in 0..cfg.k_max {
        let v = field.eval(&chunk, s)?;
        let r = l2_norm(&v);
        if !r.is_finite() {
            fault = Some(format!("non-finite field output at check {}", k + 1));
            break;
        }
        residuals.push(r);
        if r < cfg.tau_opt {
            stop_reason = StopReason::Converged;
            break;
        }
        let eta = eta_of_step(k + 1, &cfg.step_table)?;
        for (a, vi) in chunk.iter_mut().zip(&v) {
            *a -= eta * vi;
        }
        updates += 1;
    }
    let trace = InferenceTrace {
        nfe: residuals.len(),
        residuals,
        updates,
        stop_reason,
        chunk: chunk.clone(),
        fault,
    };
    Ok((chunk, trace))
}

/// Independent refinement runs over a list of conditions, each with its own
/// stream derived from `base_seed` and the item index. Order-preserving.
pub fn refine_batch<F: VelocityField + ?Sized>(
    field: &F,
    conditions: &[Vec<f64>],
    cfg: &InferConfig,
    base_seed: u64,
) -> Result<Vec<(ActionChunk, InferenceTrace)>> {
    conditions
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let mut rng = rng_from_seed(crate::rng::derive_indexed_seed(
                base_seed, "refine", index as u64,
            ));
            refine(field, s, cfg, &mut rng).map_err(|e| Error::BatchItem {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}
