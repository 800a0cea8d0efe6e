//! Brute-force oracle for the ideal equilibrium field.
//!
//! For a point-mass conditional (each condition emits a finite set of exact
//! expert chunks `μ_j` with weights `w_j`), the minimizer of the training
//! regression is the posterior mean of the restoring target given the query
//! point:
//!
//! ```text
//! f*(x) = Σ_j ∫ p(j, γ | x) (x - μ_j) c(γ)/(1-γ) dγ
//! p(j, γ | x) ∝ w_j · N(x; γ μ_j, (1-γ)² I)
//! ```
//!
//! using that the target `(ε - μ_j) c(γ)` rewrites to `(x - μ_j) c(γ)/(1-γ)`
//! on the interpolation line. The γ integral runs over a midpoint grid on
//! (0, 1); the `γ = 1` endpoint is excluded because the Gaussian degenerates
//! there. Densities are handled in log space.
//!
//! A self-normalizing Monte-Carlo estimator over the prior `(j, γ)` provides
//! an independent cross-check of the quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{c_of_gamma, DecaySchedule};
use rand::Rng as _;

/// γ-integration settings for the posterior-field oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    /// Number of midpoint nodes on (0, 1).
    pub nodes: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { nodes: 512 }
    }
}

/// One expert mode: a positive weight and the exact chunk it emits.
pub type Mode = (f64, Vec<f64>);

fn validate_modes(modes: &[Mode], x: &[f64]) -> Result<()> {
    if modes.is_empty() {
        return Err(Error::EmptyInput("oracle modes"));
    }
    for (w, mu) in modes {
        if !w.is_finite() || *w <= 0.0 {
            return Err(Error::config("mode weights must be positive finite reals"));
        }
        if mu.len() != x.len() {
            return Err(Error::DimMismatch {
                what: "oracle mode chunk",
                expected: x.len(),
                got: mu.len(),
            });
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("oracle query point".into()));
    }
    Ok(())
}

/// Log of the unnormalized posterior weight of `(mode, γ)` at `x`, dropping
/// terms constant in both: `ln w - D ln(1-γ) - ‖x - γμ‖² / (2(1-γ)²)`.
fn log_weight(w: f64, mu: &[f64], x: &[f64], gamma: f64) -> f64 {
    let one_m = 1.0 - gamma;
    let dist2: f64 = x
        .iter()
        .zip(mu)
        .map(|(&xv, &mv)| {
            let d = xv - gamma * mv;
            d * d
        })
        .sum();
    w.ln() - (x.len() as f64) * one_m.ln() - dist2 / (2.0 * one_m * one_m)
}

/// The posterior-mean field by midpoint quadrature over γ.
pub fn posterior_field(
    modes: &[Mode],
    x: &[f64],
    sched: &DecaySchedule,
    quad: &QuadratureConfig,
) -> Result<Vec<f64>> {
    validate_modes(modes, x)?;
    if quad.nodes == 0 {
        return Err(Error::config("quadrature needs at least one node"));
    }
    let n = quad.nodes;
    let mut log_ws = Vec::with_capacity(n * modes.len());
    for i in 0..n {
        let gamma = (i as f64 + 0.5) / n as f64;
        for (w, mu) in modes {
            log_ws.push(log_weight(*w, mu, x, gamma));
        }
    }
    let max_lw = log_ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_lw.is_finite() {
        return Err(Error::OracleUndefined(format!(
            "no posterior mass at point with norm {}",
            crate::field::l2_norm(x)
        )));
    }
    let mut total = 0.0;
    let mut acc = vec![0.0; x.len()];
    for i in 0..n {
        let gamma = (i as f64 + 0.5) / n as f64;
        let ratio = c_of_gamma(gamma, sched)? / (1.0 - gamma);
        for (j, (_, mu)) in modes.iter().enumerate() {
            let w = (log_ws[i * modes.len() + j] - max_lw).exp();
            if w == 0.0 {
                continue;
            }
            total += w;
            for ((a, &xv), &mv) in acc.iter_mut().zip(x).zip(mu) {
                *a += w * ratio * (xv - mv);
            }
        }
    }
    if total == 0.0 {
        return Err(Error::OracleUndefined(
            "posterior mass underflowed at every node".into(),
        ));
    }
    Ok(acc.into_iter().map(|v| v / total).collect())
}

/// Self-normalizing Monte-Carlo estimate of the same posterior mean, sampling
/// `(j, γ)` from the prior. Independent route used to cross-check the
/// quadrature.
pub fn posterior_field_mc(
    modes: &[Mode],
    x: &[f64],
    sched: &DecaySchedule,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    validate_modes(modes, x)?;
    if n_samples == 0 {
        return Err(Error::EmptyInput("monte-carlo samples"));
    }
    let total_w: f64 = modes.iter().map(|(w, _)| w).sum();
    let mut draws = Vec::with_capacity(n_samples);
    let mut max_lw = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let gamma: f64 = rng.gen_range(0.0..1.0);
        let pick: f64 = rng.gen_range(0.0..total_w);
        let mut j = 0;
        let mut cum = 0.0;
        for (idx, (w, _)) in modes.iter().enumerate() {
            cum += w;
            if pick < cum {
                j = idx;
                break;
            }
        }
        // Mode prior already accounted for by sampling j from it.
        let lw = log_weight(1.0, &modes[j].1, x, gamma);
        max_lw = max_lw.max(lw);
        draws.push((lw, gamma, j));
    }
    if !max_lw.is_finite() {
        return Err(Error::OracleUndefined(
            "monte-carlo weights underflowed".into(),
        ));
    }
    let mut total = 0.0;
    let mut acc = vec![0.0; x.len()];
    for (lw, gamma, j) in draws {
        let w = (lw - max_lw).exp();
        if w == 0.0 {
            continue;
        }
        let ratio = c_of_gamma(gamma, sched)? / (1.0 - gamma);
        total += w;
        let mu = &modes[j].1;
        for ((a, &xv), &mv) in acc.iter_mut().zip(x).zip(mu) {
            *a += w * ratio * (xv - mv);
        }
    }
    if total == 0.0 {
        return Err(Error::OracleUndefined(
            "monte-carlo posterior mass underflowed".into(),
        ));
    }
    Ok(acc.into_iter().map(|v| v / total).collect())
}
