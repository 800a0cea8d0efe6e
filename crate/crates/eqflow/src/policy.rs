//! Trained heads wrapped as planning policies for closed-loop rollouts.
//!
//! Both policies plan in normalized chunk space and hand the environment
//! denormalized displacement actions. The refinement policy's anomaly score
//! is its final residual norm; the fixed-schedule baseline scores each call
//! with the single-draw training-loss proxy evaluated at the pure-noise end.

use crate::error::Result;
use crate::infer::{refine, InferConfig, NetField};
use crate::net::FieldParams;
use crate::ood::score_plan;
use crate::rf;
use crate::rng::Rng;
use crate::task::{PlanOutcome, Policy};
use crate::train::Normalizer;

/// Adaptive-refinement policy over a stationary field.
pub struct RefinementPolicy {
    pub params: FieldParams,
    pub normalizer: Normalizer,
    pub cond_dim: usize,
    pub infer: InferConfig,
}

impl Policy for RefinementPolicy {
    fn plan(&self, s: &[f64], rng: &mut Rng) -> Result<PlanOutcome> {
        let field = NetField::new(&self.params, self.cond_dim)?;
        let (chunk, trace) = refine(&field, s, &self.infer, rng)?;
        let score = score_plan(&trace).unwrap_or(f64::INFINITY);
        Ok(PlanOutcome {
            chunk: self.normalizer.denormalize(&chunk)?,
            nfe: trace.nfe,
            stop_reason: Some(trace.stop_reason),
            residuals: trace.residuals,
            score,
            fault: trace.fault,
        })
    }
}

/// Fixed-schedule Euler policy over the time-conditioned baseline.
pub struct FixedStepPolicy {
    pub params: FieldParams,
    pub normalizer: Normalizer,
    pub n_steps: usize,
    pub cond_dim: usize,
}

impl Policy for FixedStepPolicy {
    fn plan(&self, s: &[f64], rng: &mut Rng) -> Result<PlanOutcome> {
        let chunk = rf::sample(&self.params, s, self.n_steps, rng)?;
        let score = rf::loss_proxy(&self.params, s, &chunk, rng)?;
        Ok(PlanOutcome {
            chunk: self.normalizer.denormalize(&chunk)?,
            nfe: self.n_steps,
            stop_reason: None,
            residuals: Vec::new(),
            score,
            fault: None,
        })
    }
}
