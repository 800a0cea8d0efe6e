//! The equilibrium velocity field: training target and evaluation.
//!
//! Training draws an interpolation coefficient `γ ~ U(0,1)` and noise
//! `ε ~ N(0,I)`, forms `x_γ = γ a + (1-γ) ε`, and regresses the field at
//! `(x_γ, s)` onto the restoring direction `(ε - a) c(γ)`. The coefficient is
//! never an input to the network: the field signature is `(chunk, condition)`
//! only, so one stationary field has to explain every interpolation level.
//! Since the decay vanishes at `γ = 1`, expert chunks become zero-velocity
//! equilibria of the trained field.

use crate::error::{Error, Result};
use crate::net::{backward_accumulate, forward, FieldParams};
use crate::rng::{normal_vec, Rng};
use crate::schedule::{c_of_gamma, DecaySchedule};
use rand::Rng as _;

/// A flat action chunk of length `chunk_len * action_dim`, in normalized units.
pub type ActionChunk = Vec<f64>;

/// Task-context vector conditioning a planning call.
pub type Condition = Vec<f64>;

/// One conditioned demonstration. `mode_id` is oracle bookkeeping (1-based)
/// and is never shown to the model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingSample {
    pub condition: Condition,
    pub chunk: ActionChunk,
    pub mode_id: usize,
}

/// `γ a + (1-γ) ε`, element-wise.
pub fn interpolate(a: &[f64], eps: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if a.len() != eps.len() {
        return Err(Error::DimMismatch {
            what: "interpolation endpoints",
            expected: a.len(),
            got: eps.len(),
        });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(a.iter()
        .zip(eps)
        .map(|(&av, &ev)| gamma * av + (1.0 - gamma) * ev)
        .collect())
}

/// The regression target `(ε - a) c(γ)`. Vanishes identically at `γ = 1`.
pub fn restoring_target(
    a: &[f64],
    eps: &[f64],
    gamma: f64,
    sched: &DecaySchedule,
) -> Result<Vec<f64>> {
    if a.len() != eps.len() {
        return Err(Error::DimMismatch {
            what: "restoring-target endpoints",
            expected: a.len(),
            got: eps.len(),
        });
    }
    let c = c_of_gamma(gamma, sched)?;
    Ok(a.iter().zip(eps).map(|(&av, &ev)| (ev - av) * c).collect())
}

fn field_input(x: &[f64], s: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(x.len() + s.len());
    input.extend_from_slice(x);
    input.extend_from_slice(s);
    input
}

/// Evaluates the stationary field `f(x, s)`. The network consumes the chunk
/// concatenated with the condition; there is no time slot in the signature.
pub fn eval_field(params: &FieldParams, x: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    if params.input_dim() != x.len() + s.len() {
        return Err(Error::DimMismatch {
            what: "field input (chunk + condition)",
            expected: params.input_dim(),
            got: x.len() + s.len(),
        });
    }
    if params.output_dim() != x.len() {
        return Err(Error::DimMismatch {
            what: "field output (chunk)",
            expected: params.output_dim(),
            got: x.len(),
        });
    }
    let (out, _) = forward(params, &field_input(x, s))?;
    Ok(out)
}

/// Deterministic per-sample loss and gradient accumulation at a fixed
/// `(γ, ε)` draw. Returns `‖f(x_γ, s) - g*‖²`; adds `weight`-scaled gradients
/// of that squared error into `accum`.
pub fn sample_loss_grads(
    params: &FieldParams,
    sample: &TrainingSample,
    gamma: f64,
    eps: &[f64],
    sched: &DecaySchedule,
    weight: f64,
    accum: &mut FieldParams,
) -> Result<f64> {
    let x = interpolate(&sample.chunk, eps, gamma)?;
    let target = restoring_target(&sample.chunk, eps, gamma, sched)?;
    let input = field_input(&x, &sample.condition);
    if params.input_dim() != input.len() || params.output_dim() != sample.chunk.len() {
        return Err(Error::DimMismatch {
            what: "training sample vs network",
            expected: params.input_dim(),
            got: input.len(),
        });
    }
    let (out, cache) = forward(params, &input)?;
    let residual: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
    let loss: f64 = residual.iter().map(|r| r * r).sum();
    let output_grad: Vec<f64> = residual.iter().map(|r| 2.0 * weight * r).collect();
    backward_accumulate(params, &cache, &output_grad, accum)?;
    Ok(loss)
}

/// Monte-Carlo batch loss and gradients: one `(γ, ε)` draw per sample,
/// loss averaged over the batch.
pub fn loss_and_grads(
    params: &FieldParams,
    batch: &[TrainingSample],
    sched: &DecaySchedule,
    rng: &mut Rng,
) -> Result<(f64, FieldParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for sample in batch {
        let gamma: f64 = rng.gen_range(0.0..1.0);
        let eps = normal_vec(rng, sample.chunk.len());
        total += sample_loss_grads(params, sample, gamma, &eps, sched, weight, &mut grads)?;
    }
    let loss = total * weight;
    if !loss.is_finite() {
        return Err(Error::NonFinite("equilibrium training loss".into()));
    }
    Ok((loss, grads))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{finite_difference_grad, init_network, max_relative_error, NetworkSpec};
    use crate::rng::rng_from_seed;

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let a = vec![1.0, 0.0];
        let eps = vec![0.0, 1.0];
        assert_eq!(interpolate(&a, &eps, 0.0).unwrap(), eps);
        assert_eq!(interpolate(&a, &eps, 1.0).unwrap(), a);
        assert_eq!(interpolate(&a, &eps, 0.5).unwrap(), vec![0.5, 0.5]);
        assert!(interpolate(&a, &[0.0], 0.5).is_err());
        assert!(interpolate(&a, &eps, 1.5).is_err());
    }

    #[test]
    fn restoring_target_vanishes_at_gamma_one() {
        let sched = DecaySchedule::default();
        let t = restoring_target(&[3.0, -2.0], &[0.5, 0.5], 1.0, &sched).unwrap();
        assert_eq!(t, vec![0.0, 0.0]);
    }

    #[test]
    fn restoring_target_plateau_and_linear_values() {
        let sched = DecaySchedule::default();
        let t = restoring_target(&[1.0, 0.0], &[0.0, 0.0], 0.05, &sched).unwrap();
        assert_eq!(t, vec![-4.0, 0.0]);
        let t = restoring_target(&[1.0, 0.0], &[0.0, 0.0], 0.55, &sched).unwrap();
        assert!((t[0] + 2.0).abs() < 1e-15 && t[1] == 0.0);
    }

    #[test]
    fn eval_field_zero_params_and_purity() {
        let spec = NetworkSpec::new(4, vec![6], 2);
        let zero = init_network(&spec, 0).unwrap().zeros_like();
        let out = eval_field(&zero, &[0.3, -0.4], &[1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        let p = init_network(&spec, 5).unwrap();
        let a = eval_field(&p, &[0.3, -0.4], &[1.0, 2.0]).unwrap();
        let b = eval_field(&p, &[0.3, -0.4], &[1.0, 2.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn field_signature_has_no_time_slot() {
        // A network sized for (chunk + condition + 1) must be rejected.
        let spec = NetworkSpec::new(5, vec![6], 2);
        let p = init_network(&spec, 0).unwrap();
        assert!(eval_field(&p, &[0.3, -0.4], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn perfectly_fitting_params_give_zero_loss() {
        // Single affine layer with zero weights and bias equal to the target.
        let sched = DecaySchedule::default();
        let sample = TrainingSample {
            condition: vec![0.5],
            chunk: vec![1.0, 0.0],
            mode_id: 1,
        };
        let gamma = 0.5;
        let eps = vec![0.0, 0.0];
        let target = restoring_target(&sample.chunk, &eps, gamma, &sched).unwrap();
        let mut p = init_network(&NetworkSpec::new(3, vec![], 2), 0)
            .unwrap()
            .zeros_like();
        p.layers[0].biases.copy_from_slice(&target);
        let mut accum = p.zeros_like();
        let loss = sample_loss_grads(&p, &sample, gamma, &eps, &sched, 1.0, &mut accum).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn zero_params_loss_is_squared_target_norm() {
        // c(0.5) = 4*0.5/0.9 = 20/9; target = (-20/9, 0); loss = 400/81.
        let sched = DecaySchedule::default();
        let sample = TrainingSample {
            condition: vec![0.0],
            chunk: vec![1.0, 0.0],
            mode_id: 1,
        };
        let p = init_network(&NetworkSpec::new(3, vec![], 2), 0)
            .unwrap()
            .zeros_like();
        let mut accum = p.zeros_like();
        let loss =
            sample_loss_grads(&p, &sample, 0.5, &[0.0, 0.0], &sched, 1.0, &mut accum).unwrap();
        assert!((loss - 400.0 / 81.0).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_grads_match_finite_differences() {
        let sched = DecaySchedule::default();
        let spec = NetworkSpec::new(4, vec![7, 5], 3);
        let params = init_network(&spec, 31).unwrap();
        let sample = TrainingSample {
            condition: vec![0.8],
            chunk: vec![0.4, -0.2, 0.9],
            mode_id: 1,
        };
        let gamma = 0.37;
        let eps = vec![0.3, -1.1, 0.6];
        let mut analytic = params.zeros_like();
        sample_loss_grads(&params, &sample, gamma, &eps, &sched, 1.0, &mut analytic).unwrap();
        let fd = finite_difference_grad(
            &params,
            |p| {
                let mut sink = p.zeros_like();
                sample_loss_grads(p, &sample, gamma, &eps, &sched, 0.0, &mut sink)
            },
            1e-4,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &fd);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn batch_loss_requires_samples_and_is_deterministic_per_seed() {
        let sched = DecaySchedule::default();
        let spec = NetworkSpec::new(3, vec![6], 2);
        let params = init_network(&spec, 3).unwrap();
        assert!(matches!(
            loss_and_grads(&params, &[], &sched, &mut rng_from_seed(0)),
            Err(Error::EmptyInput(_))
        ));
        let batch = vec![TrainingSample {
            condition: vec![0.2],
            chunk: vec![0.5, -0.5],
            mode_id: 1,
        }];
        let (l1, g1) = loss_and_grads(&params, &batch, &sched, &mut rng_from_seed(11)).unwrap();
        let (l2, g2) = loss_and_grads(&params, &batch, &sched, &mut rng_from_seed(11)).unwrap();
        assert_eq!(l1, l2);
        assert!(g1.flat_iter().zip(g2.flat_iter()).all(|(a, b)| a == b));
    }
}
