//! Adaptive-moment optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::FieldParams;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment accumulators over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    pub fn new(param_count: usize, hyper: AdamHyper) -> Self {
        OptimizerState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step_count: 0,
            hyper,
        }
    }
}

/// One bias-corrected update, in place. Rejects non-finite gradients without
/// touching the parameters or the moments.
pub fn adam_step(
    params: &mut FieldParams,
    grads: &FieldParams,
    state: &mut OptimizerState,
) -> Result<()> {
    if !params.shape_matches(grads) {
        return Err(Error::config("gradient shapes do not match parameters"));
    }
    let n = params.parameter_count();
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::config("optimizer state does not match parameters"));
    }
    if !grads.all_finite() {
        return Err(Error::Divergence {
            step: state.step_count + 1,
        });
    }
    state.step_count += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.step_count as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step_count as i32);
    for ((p, &g), (m, v)) in params
        .flat_iter_mut()
        .zip(grads.flat_iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_network, NetworkSpec};

    fn scalar_params(value: f64) -> FieldParams {
        let mut p = init_network(&NetworkSpec::new(1, vec![], 1), 0)
            .unwrap()
            .zeros_like();
        p.layers[0].weights[0] = value;
        p
    }

    fn grad_like(params: &FieldParams, weight_grad: f64) -> FieldParams {
        let mut g = params.zeros_like();
        g.layers[0].weights[0] = weight_grad;
        g
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = scalar_params(1.5);
        let g = p.zeros_like();
        let mut st = OptimizerState::new(p.parameter_count(), AdamHyper::default());
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.layers[0].weights[0], 1.5);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        // Hand evaluation for one scalar step: m_hat = g, v_hat = g^2,
        // update = lr * g / (|g| + eps).
        let g_val = 2.0;
        let hyper = AdamHyper::default();
        let mut p = scalar_params(0.7);
        let g = grad_like(&p, g_val);
        let mut st = OptimizerState::new(p.parameter_count(), hyper);
        adam_step(&mut p, &g, &mut st).unwrap();
        let expected = 0.7 - hyper.lr * g_val / (g_val.abs() + hyper.eps);
        assert!((p.layers[0].weights[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_objective_converges() {
        // Minimize 0.5 p^2: gradient is p. |p| should fall below 1e-3 well
        // within 5000 steps.
        let mut p = scalar_params(1.0);
        let mut st = OptimizerState::new(p.parameter_count(), AdamHyper::default());
        let mut reached = None;
        for step in 0..5000 {
            let g = grad_like(&p, p.layers[0].weights[0]);
            adam_step(&mut p, &g, &mut st).unwrap();
            if p.layers[0].weights[0].abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "did not reach |p| < 1e-3 in 5000 steps");
    }

    #[test]
    fn non_finite_grads_are_rejected_without_mutation() {
        let mut p = scalar_params(0.4);
        let g = grad_like(&p, f64::NAN);
        let mut st = OptimizerState::new(p.parameter_count(), AdamHyper::default());
        let err = adam_step(&mut p, &g, &mut st);
        assert!(matches!(err, Err(Error::Divergence { .. })));
        assert_eq!(p.layers[0].weights[0], 0.4);
        assert_eq!(st.step_count, 0);
        assert!(st.m.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn step_count_increments_by_one_per_update() {
        let mut p = scalar_params(1.0);
        let mut st = OptimizerState::new(p.parameter_count(), AdamHyper::default());
        for expected in 1..=5u64 {
            let g = grad_like(&p, 0.1);
            adam_step(&mut p, &g, &mut st).unwrap();
            assert_eq!(st.step_count, expected);
        }
    }
}
