//! Time-conditioned rectified-flow baseline.
//!
//! The baseline network takes `concat(chunk, condition, γ)` — one extra
//! scalar slot for the interpolation time — and is trained to regress the
//! constant transport direction `a - ε` at `x_γ = γ a + (1-γ) ε`. Data sits
//! at `γ = 1`, noise at `γ = 0`, so integrating the field from 0 to 1 with
//! unit total step length carries noise to data. Sampling is fixed-schedule
//! Euler; the number of function evaluations always equals the step count,
//! in contrast to the adaptive refinement loop of the equilibrium head.
//!
//! `point_field` is the closed-form conditional velocity for a one-point
//! data distribution; Euler integration on it lands on the data point
//! exactly for any step count (the per-step contraction telescopes), which
//! makes it a hard correctness oracle for the integrator.

use crate::error::{Error, Result};
use crate::field::{interpolate, TrainingSample};
use crate::net::{backward_accumulate, forward, FieldParams};
use crate::rng::{normal_vec, Rng};
use rand::Rng as _;

fn time_input(x: &[f64], s: &[f64], gamma: f64) -> Vec<f64> {
    let mut input = Vec::with_capacity(x.len() + s.len() + 1);
    input.extend_from_slice(x);
    input.extend_from_slice(s);
    input.push(gamma);
    input
}

/// Evaluates the time-conditioned field `v(x, γ, s)`.
pub fn eval_time_field(params: &FieldParams, x: &[f64], gamma: f64, s: &[f64]) -> Result<Vec<f64>> {
    if params.input_dim() != x.len() + s.len() + 1 {
        return Err(Error::DimMismatch {
            what: "time-field input (chunk + condition + time)",
            expected: params.input_dim(),
            got: x.len() + s.len() + 1,
        });
    }
    if params.output_dim() != x.len() {
        return Err(Error::DimMismatch {
            what: "time-field output (chunk)",
            expected: params.output_dim(),
            got: x.len(),
        });
    }
    let (out, _) = forward(params, &time_input(x, s, gamma))?;
    Ok(out)
}

/// Deterministic per-sample loss and gradient accumulation at a fixed
/// `(γ, ε)` draw: `‖v(x_γ, γ, s) - (a - ε)‖²`.
pub fn sample_loss_grads(
    params: &FieldParams,
    sample: &TrainingSample,
    gamma: f64,
    eps: &[f64],
    weight: f64,
    accum: &mut FieldParams,
) -> Result<f64> {
    let x = interpolate(&sample.chunk, eps, gamma)?;
    let input = time_input(&x, &sample.condition, gamma);
    if params.input_dim() != input.len() || params.output_dim() != sample.chunk.len() {
        return Err(Error::DimMismatch {
            what: "training sample vs time-field network",
            expected: params.input_dim(),
            got: input.len(),
        });
    }
    let (out, cache) = forward(params, &input)?;
    let residual: Vec<f64> = out
        .iter()
        .zip(sample.chunk.iter().zip(eps))
        .map(|(o, (&av, &ev))| o - (av - ev))
        .collect();
    let loss: f64 = residual.iter().map(|r| r * r).sum();
    let output_grad: Vec<f64> = residual.iter().map(|r| 2.0 * weight * r).collect();
    backward_accumulate(params, &cache, &output_grad, accum)?;
    Ok(loss)
}

/// Batch loss and gradients with one `(γ, ε)` draw per sample.
pub fn loss_and_grads(
    params: &FieldParams,
    batch: &[TrainingSample],
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
        total += sample_loss_grads(params, sample, gamma, &eps, weight, &mut grads)?;
    }
    let loss = total * weight;
    if !loss.is_finite() {
        return Err(Error::NonFinite("rectified-flow training loss".into()));
    }
    Ok((loss, grads))
}

/// Fixed-schedule Euler integration of an arbitrary `(x, γ) -> velocity`
/// field from `γ = 0` to `γ = 1` with uniform steps.
pub fn euler_sample<F>(field: F, n_steps: usize, init: Vec<f64>) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    if n_steps == 0 {
        return Err(Error::config("euler integration needs at least one step"));
    }
    let dg = 1.0 / n_steps as f64;
    let mut x = init;
    for k in 0..n_steps {
        let gamma = k as f64 / n_steps as f64;
        let v = field(&x, gamma)?;
        if v.len() != x.len() {
            return Err(Error::DimMismatch {
                what: "euler velocity",
                expected: x.len(),
                got: v.len(),
            });
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dg * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("euler state after step {k}")));
        }
    }
    Ok(x)
}

/// Draws a chunk from the baseline: `x⁰ = ε`, then `n_steps` Euler updates.
/// NFE equals `n_steps` for every call.
pub fn sample(params: &FieldParams, s: &[f64], n_steps: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let init = normal_vec(rng, params.output_dim());
    euler_sample(
        |x, gamma| eval_time_field(params, x, gamma, s),
        n_steps,
        init,
    )
}

/// Exact conditional velocity for a one-point data distribution:
/// `(a* - x) / (1 - γ)`. Undefined at the `γ = 1` pole.
pub fn point_field(x: &[f64], gamma: f64, a_star: &[f64]) -> Result<Vec<f64>> {
    if gamma >= 1.0 {
        return Err(Error::config("point field undefined at gamma = 1"));
    }
    if x.len() != a_star.len() {
        return Err(Error::DimMismatch {
            what: "point-field target",
            expected: x.len(),
            got: a_star.len(),
        });
    }
    Ok(x.iter()
        .zip(a_star)
        .map(|(&xv, &av)| (av - xv) / (1.0 - gamma))
        .collect())
}

/// Single-evaluation training-loss proxy at the pure-noise end of the
/// interpolation, with an explicit noise draw: `‖v(ε, 0, s) - (â - ε)‖²`.
pub fn loss_proxy_at(
    params: &FieldParams,
    s: &[f64],
    generated: &[f64],
    eps: &[f64],
) -> Result<f64> {
    if generated.len() != eps.len() {
        return Err(Error::DimMismatch {
            what: "proxy noise draw",
            expected: generated.len(),
            got: eps.len(),
        });
    }
    let v = eval_time_field(params, eps, 0.0, s)?;
    let loss: f64 = v
        .iter()
        .zip(generated.iter().zip(eps))
        .map(|(vv, (&gv, &ev))| {
            let r = vv - (gv - ev);
            r * r
        })
        .sum();
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss proxy".into()));
    }
    Ok(loss)
}

/// One-draw anomaly score for a generated chunk under the baseline head.
pub fn loss_proxy(
    params: &FieldParams,
    s: &[f64],
    generated: &[f64],
    rng: &mut Rng,
) -> Result<f64> {
    let eps = normal_vec(rng, generated.len());
    loss_proxy_at(params, s, generated, &eps)
}
