//! Minimal dense feed-forward network with exact reverse-mode gradients.
//!
//! All parameters are `f64`. A network is a stack of affine layers
//! `z = W x + b` with an element-wise activation on every layer except the
//! last, which stays affine so the output range is unconstrained. Weights are
//! row-major `(out_dim, in_dim)`.
//!
//! `forward` records an activation cache; `backward` consumes it and returns
//! the exact gradients of `<output, output_grad>` with respect to every
//! parameter and to the input. `finite_difference_grad` is the independent
//! check used by the gradcheck command and the test suite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use rand::Rng as _;

/// Element-wise activation for hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            // ln(1 + e^z), computed from the stable branch.
            Activation::Softplus => {
                if z > 30.0 {
                    z
                } else if z < -30.0 {
                    z.exp()
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative at pre-activation `z`, given the stored activation `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

/// Architecture of a velocity-field network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden_dims() -> Vec<usize> {
    vec![256, 256, 256]
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        NetworkSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("network input/output dims must be >= 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden layer dims must be >= 1"));
        }
        Ok(())
    }

    /// Per-layer `(in_dim, out_dim)` pairs, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

/// One affine layer, row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }
}

/// All weights and biases of a velocity-field network.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl FieldParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Reconstructs the architecture this parameter set belongs to.
    pub fn network_spec(&self) -> NetworkSpec {
        let hidden = self.layers[..self.layers.len().saturating_sub(1)]
            .iter()
            .map(|l| l.out_dim)
            .collect();
        NetworkSpec {
            input_dim: self.input_dim(),
            hidden_dims: hidden,
            output_dim: self.output_dim(),
            activation: self.activation,
        }
    }

    pub fn zeros_like(&self) -> FieldParams {
        FieldParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn shape_matches(&self, other: &FieldParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    pub fn flat_iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn flat_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn all_finite(&self) -> bool {
        self.flat_iter().all(|v| v.is_finite())
    }
}

/// Initializes parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero.
/// Deterministic for a given `(spec, seed)`.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<FieldParams> {
    spec.validate()?;
    let mut rng: Rng = rng_from_seed(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(in_dim, out_dim)| {
            let limit = 1.0 / (in_dim as f64).sqrt();
            let weights = (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            Layer {
                in_dim,
                out_dim,
                weights,
                biases: vec![0.0; out_dim],
            }
        })
        .collect();
    Ok(FieldParams {
        layers,
        activation: spec.activation,
    })
}

/// Activation record from a forward pass, sufficient for one backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input vector of layer `l`; `inputs[L]` is the output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation vectors for the hidden layers (all layers but the last).
    pre_acts: Vec<Vec<f64>>,
}

/// `out = W x + b`, with a 4-lane accumulator so the dot products vectorize.
fn affine_into(weights: &[f64], biases: &[f64], input: &[f64], out: &mut [f64]) {
    let n = input.len();
    for (o, (row, bias)) in out
        .iter_mut()
        .zip(weights.chunks_exact(n).zip(biases.iter()))
    {
        let mut acc = [0.0f64; 4];
        let mut rows = row.chunks_exact(4);
        let mut xs = input.chunks_exact(4);
        for (rc, xc) in (&mut rows).zip(&mut xs) {
            acc[0] += rc[0] * xc[0];
            acc[1] += rc[1] * xc[1];
            acc[2] += rc[2] * xc[2];
            acc[3] += rc[3] * xc[3];
        }
        let mut tail = 0.0;
        for (r, x) in rows.remainder().iter().zip(xs.remainder()) {
            tail += r * x;
        }
        *o = ((acc[0] + acc[2]) + (acc[1] + acc[3])) + tail + bias;
    }
}

/// Evaluates the network. Pure: identical inputs yield identical outputs.
pub fn forward(params: &FieldParams, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if input.len() != params.input_dim() {
        return Err(Error::DimMismatch {
            what: "network input",
            expected: params.input_dim(),
            got: input.len(),
        });
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network input".into()));
    }
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers + 1);
    let mut pre_acts = Vec::with_capacity(n_layers.saturating_sub(1));
    inputs.push(input.to_vec());
    for (l, layer) in params.layers.iter().enumerate() {
        let x = inputs.last().unwrap();
        let mut z = vec![0.0; layer.out_dim];
        affine_into(&layer.weights, &layer.biases, x, &mut z);
        if l + 1 < n_layers {
            let y = z.iter().map(|&v| params.activation.apply(v)).collect();
            pre_acts.push(z);
            inputs.push(y);
        } else {
            inputs.push(z);
        }
    }
    let output = inputs.last().unwrap().clone();
    Ok((output, ForwardCache { inputs, pre_acts }))
}

fn check_cache(params: &FieldParams, cache: &ForwardCache) -> Result<()> {
    let ok = cache.inputs.len() == params.layers.len() + 1
        && cache.pre_acts.len() == params.layers.len().saturating_sub(1)
        && params
            .layers
            .iter()
            .enumerate()
            .all(|(l, layer)| {
                cache.inputs[l].len() == layer.in_dim && cache.inputs[l + 1].len() == layer.out_dim
            });
    if ok {
        Ok(())
    } else {
        Err(Error::config(
            "forward cache does not match network shape (stale or mismatched cache)",
        ))
    }
}

/// Exact reverse-mode gradients of `<output, output_grad>` with respect to
/// all parameters and to the input.
pub fn backward(
    params: &FieldParams,
    cache: &ForwardCache,
    output_grad: &[f64],
) -> Result<(FieldParams, Vec<f64>)> {
    let mut grads = params.zeros_like();
    let input_grad = backward_accumulate(params, cache, output_grad, &mut grads)?;
    Ok((grads, input_grad))
}

/// Reverse pass that adds parameter gradients into an existing buffer, so a
/// training loop can sweep a batch without reallocating per sample.
pub fn backward_accumulate(
    params: &FieldParams,
    cache: &ForwardCache,
    output_grad: &[f64],
    grads: &mut FieldParams,
) -> Result<Vec<f64>> {
    check_cache(params, cache)?;
    if output_grad.len() != params.output_dim() {
        return Err(Error::DimMismatch {
            what: "output gradient",
            expected: params.output_dim(),
            got: output_grad.len(),
        });
    }
    if !params.shape_matches(grads) {
        return Err(Error::config("gradient accumulator shape mismatch"));
    }
    let mut delta = output_grad.to_vec();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let x = &cache.inputs[l];
        let g = &mut grads.layers[l];
        // dL/dW = outer(delta, x); dL/db = delta.
        for (i, &d) in delta.iter().enumerate() {
            let row = &mut g.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
            for (w, &xv) in row.iter_mut().zip(x.iter()) {
                *w += d * xv;
            }
            g.biases[i] += d;
        }
        // dL/dx = W^T delta, accumulated row by row.
        let mut input_grad = vec![0.0; layer.in_dim];
        for (i, &d) in delta.iter().enumerate() {
            let row = &layer.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
            for (gi, &w) in input_grad.iter_mut().zip(row.iter()) {
                *gi += d * w;
            }
        }
        if l > 0 {
            // Chain through the activation of the preceding hidden layer.
            let z = &cache.pre_acts[l - 1];
            let y = &cache.inputs[l];
            for ((gi, &zv), &yv) in input_grad.iter_mut().zip(z.iter()).zip(y.iter()) {
                *gi *= params.activation.derivative(zv, yv);
            }
        }
        delta = input_grad;
    }
    Ok(delta)
}

/// Central finite differences `(L(p+h) - L(p-h)) / 2h` per parameter.
///
/// Independent of the reverse-mode path; intended for small networks.
pub fn finite_difference_grad<F>(params: &FieldParams, loss: F, h: f64) -> Result<FieldParams>
where
    F: Fn(&FieldParams) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::config("finite-difference step must be > 0"));
    }
    let mut work = params.clone();
    let mut grads = params.zeros_like();
    let n = params.parameter_count();
    for idx in 0..n {
        let orig = *flat_mut(&mut work, idx);
        *flat_mut(&mut work, idx) = orig + h;
        let lp = loss(&work)?;
        *flat_mut(&mut work, idx) = orig - h;
        let lm = loss(&work)?;
        *flat_mut(&mut work, idx) = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite("loss at perturbed parameters".into()));
        }
        *flat_mut(&mut grads, idx) = (lp - lm) / (2.0 * h);
    }
    Ok(grads)
}

fn flat_mut(params: &mut FieldParams, mut idx: usize) -> &mut f64 {
    for layer in &mut params.layers {
        if idx < layer.weights.len() {
            return &mut layer.weights[idx];
        }
        idx -= layer.weights.len();
        if idx < layer.biases.len() {
            return &mut layer.biases[idx];
        }
        idx -= layer.biases.len();
    }
    panic!("flat parameter index out of range");
}

/// Worst relative disagreement between two gradient sets.
///
/// Entries where both magnitudes are below 1e-6 count as agreeing exactly.
pub fn max_relative_error(a: &FieldParams, b: &FieldParams) -> f64 {
    a.flat_iter()
        .zip(b.flat_iter())
        .map(|(&x, &y)| {
            let denom = x.abs().max(y.abs());
            if denom <= 1e-6 {
                0.0
            } else {
                (x - y).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;

    fn spec(input: usize, hidden: Vec<usize>, output: usize) -> NetworkSpec {
        NetworkSpec::new(input, hidden, output)
    }

    #[test]
    fn empty_hidden_is_single_affine_layer_with_zero_bias() {
        let p = init_network(&spec(2, vec![], 2), 123).unwrap();
        assert_eq!(p.layers.len(), 1);
        assert!(p.layers[0].biases.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let s = spec(3, vec![8, 8], 2);
        let a = init_network(&s, 7).unwrap();
        let b = init_network(&s, 7).unwrap();
        assert_eq!(a, b);
        let c = init_network(&s, 8).unwrap();
        assert!(a.flat_iter().zip(c.flat_iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(init_network(&spec(0, vec![], 2), 1).is_err());
        assert!(init_network(&spec(2, vec![4, 0], 2), 1).is_err());
    }

    #[test]
    fn zero_params_map_everything_to_zero() {
        let p = init_network(&spec(3, vec![4], 2), 1).unwrap().zeros_like();
        let (out, _) = forward(&p, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_affine_layer() {
        let mut p = init_network(&spec(2, vec![], 2), 1).unwrap();
        p.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        let (out, _) = forward(&p, &[1.0, 2.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn forward_is_pure() {
        let p = init_network(&spec(4, vec![8, 8], 3), 5).unwrap();
        let x = [0.3, -1.2, 0.7, 2.0];
        let (a, _) = forward(&p, &x).unwrap();
        let (b, _) = forward(&p, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_network(&spec(2, vec![], 1), 1).unwrap();
        assert!(forward(&p, &[1.0]).is_err());
        assert!(forward(&p, &[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn backward_zero_output_grad_gives_zero_grads() {
        let p = init_network(&spec(3, vec![6], 2), 2).unwrap();
        let (_, cache) = forward(&p, &[0.1, 0.2, 0.3]).unwrap();
        let (g, xg) = backward(&p, &cache, &[0.0, 0.0]).unwrap();
        assert!(g.flat_iter().all(|&v| v == 0.0));
        assert!(xg.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_affine_closed_form() {
        let p = init_network(&spec(2, vec![], 2), 3).unwrap();
        let x = [0.5, -1.5];
        let g = [2.0, -0.25];
        let (_, cache) = forward(&p, &x).unwrap();
        let (grads, _) = backward(&p, &cache, &g).unwrap();
        // weight grad = outer(g, x), bias grad = g
        let w = &grads.layers[0].weights;
        assert_eq!(w[0], g[0] * x[0]);
        assert_eq!(w[1], g[0] * x[1]);
        assert_eq!(w[2], g[1] * x[0]);
        assert_eq!(w[3], g[1] * x[1]);
        assert_eq!(grads.layers[0].biases, g.to_vec());
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let p1 = init_network(&spec(3, vec![6], 2), 2).unwrap();
        let p2 = init_network(&spec(3, vec![7], 2), 2).unwrap();
        let (_, cache) = forward(&p1, &[0.1, 0.2, 0.3]).unwrap();
        assert!(backward(&p2, &cache, &[1.0, 1.0]).is_err());
    }

    /// Scalar loss `<f(x), g>` for a fixed direction g, as used by gradcheck.
    fn directional_loss(x: Vec<f64>, g: Vec<f64>) -> impl Fn(&FieldParams) -> crate::Result<f64> {
        move |p: &FieldParams| {
            let (out, _) = forward(p, &x)?;
            Ok(out.iter().zip(&g).map(|(o, gg)| o * gg).sum())
        }
    }

    #[test]
    fn reverse_mode_matches_finite_differences() {
        for (seed, act) in [(11u64, Activation::Tanh), (12, Activation::Softplus)] {
            let mut s = spec(5, vec![12, 9], 4);
            s.activation = act;
            let p = init_network(&s, seed).unwrap();
            let mut rng = rng_from_seed(seed ^ 0xabcd);
            let x = normal_vec(&mut rng, 5);
            let g = normal_vec(&mut rng, 4);
            let (_, cache) = forward(&p, &x).unwrap();
            let (analytic, _) = backward(&p, &cache, &g).unwrap();
            let fd =
                finite_difference_grad(&p, directional_loss(x.clone(), g.clone()), 1e-4).unwrap();
            let err = max_relative_error(&analytic, &fd);
            assert!(err < 1e-4, "max relative error {err} (activation {act:?})");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = init_network(&spec(4, vec![10], 3), 21).unwrap();
        let mut rng = rng_from_seed(99);
        let x = normal_vec(&mut rng, 4);
        let g = normal_vec(&mut rng, 3);
        let (_, cache) = forward(&p, &x).unwrap();
        let (_, input_grad) = backward(&p, &cache, &g).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let lp: f64 = forward(&p, &xp).unwrap().0.iter().zip(&g).map(|(o, gg)| o * gg).sum();
            let lm: f64 = forward(&p, &xm).unwrap().0.iter().zip(&g).map(|(o, gg)| o * gg).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - input_grad[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn fd_quadratic_loss_recovers_derivative() {
        // One trainable scalar: a 1x1 affine layer with the bias held at zero.
        let mut p = init_network(&spec(1, vec![], 1), 1).unwrap();
        p.layers[0].weights[0] = 3.0;
        let loss = |q: &FieldParams| Ok(0.5 * q.layers[0].weights[0].powi(2));
        let g = finite_difference_grad(&p, loss, 1e-4).unwrap();
        assert!((g.layers[0].weights[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn fd_constant_loss_is_zero() {
        let p = init_network(&spec(2, vec![3], 2), 1).unwrap();
        let g = finite_difference_grad(&p, |_| Ok(1.25), 1e-4).unwrap();
        assert!(g.flat_iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let p = init_network(&spec(3, vec![5, 4], 2), 1).unwrap();
        assert_eq!(p.parameter_count(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(p.network_spec(), spec(3, vec![5, 4], 2));
    }
}
