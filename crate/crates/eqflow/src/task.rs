//! Synthetic conditional-control ground truth.
//!
//! Conditions are 2-D relative targets. For each condition the expert emits
//! `M` chunks of `chunk_len` displacement actions from the origin to the
//! target: mode 1 goes straight, higher modes bow sideways by the detour
//! amplitude at mid-trajectory (alternating sides). Chunks are exact, so the
//! posterior-field oracle has a closed form per mode.
//!
//! In-distribution conditions live on an annulus; out-of-distribution
//! conditions on a farther, disjoint annulus — a radius shift the trained
//! field never saw. Episodes run a receding-horizon loop on a point-mass:
//! plan a chunk from the relative target, execute a prefix, re-observe,
//! re-plan. An optional online monitor watches per-call anomaly scores and
//! terminates the episode at its first flag.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::TrainingSample;
use crate::infer::StopReason;
use crate::rng::Rng;
use rand::Rng as _;

/// Per-dimension magnitude limit the environment enforces on actions.
pub const ACTION_CLAMP: f64 = 0.25;

/// Geometry of the synthetic task family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureTaskSpec {
    /// Action dimension per step; the point-mass environment is 2-D.
    pub action_dim: usize,
    /// Chunk length (actions per planning call).
    pub chunk_len: usize,
    /// Expert modes per condition.
    pub modes_per_condition: usize,
    /// In-distribution condition radii `[lo, hi]`.
    pub id_region: [f64; 2],
    /// Out-of-distribution condition radii `[lo, hi]`.
    pub ood_region: [f64; 2],
    /// Sideways displacement of the bowed modes at mid-trajectory.
    pub detour_amplitude: f64,
}

impl Default for MixtureTaskSpec {
    fn default() -> Self {
        MixtureTaskSpec {
            action_dim: 2,
            chunk_len: 16,
            modes_per_condition: 2,
            id_region: [0.5, 1.0],
            ood_region: [1.5, 2.0],
            detour_amplitude: 0.4,
        }
    }
}

impl MixtureTaskSpec {
    pub fn chunk_dim(&self) -> usize {
        self.action_dim * self.chunk_len
    }

    pub fn cond_dim(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_dim != 2 {
            return Err(Error::config("the point-mass task is 2-D: action_dim must be 2"));
        }
        if self.chunk_len == 0 {
            return Err(Error::config("chunk length must be >= 1"));
        }
        if self.modes_per_condition == 0 {
            return Err(Error::config("need at least one expert mode"));
        }
        for (name, r) in [("id_region", self.id_region), ("ood_region", self.ood_region)] {
            if !(r[0] >= 0.0 && r[1] >= r[0]) {
                return Err(Error::config(format!("{name} radii must satisfy 0 <= lo <= hi")));
            }
        }
        if self.ood_region[0] <= self.id_region[1] {
            return Err(Error::config(
                "regions must be disjoint: min OOD radius must exceed max ID radius",
            ));
        }
        if self.detour_amplitude.is_nan() || self.detour_amplitude < 0.0 {
            return Err(Error::config("detour amplitude must be >= 0"));
        }
        Ok(())
    }
}

/// Condition split an episode or sample is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Id,
    Ood,
}

/// Uniform draw over the split's annulus (uniform in area).
pub fn sample_condition(split: Split, spec: &MixtureTaskSpec, rng: &mut Rng) -> Vec<f64> {
    let [lo, hi] = match split {
        Split::Id => spec.id_region,
        Split::Ood => spec.ood_region,
    };
    let u: f64 = rng.gen_range(0.0..1.0);
    let r = (lo * lo + u * (hi * hi - lo * lo)).sqrt();
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    vec![r * theta.cos(), r * theta.sin()]
}

/// Triangular bump: 0 at both ends, 1 at the midpoint.
fn bump(u: f64) -> f64 {
    1.0 - (2.0 * u - 1.0).abs()
}

/// Signed bow amplitude of mode `j` (1-based): 0, +1, -1, +2, -2, ... times
/// the detour amplitude.
fn mode_amplitude(j: usize, amp: f64) -> f64 {
    if j <= 1 {
        return 0.0;
    }
    let level = (j / 2) as f64;
    let sign = if j.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * level * amp
}

/// The `M` exact expert chunks for condition `s`, in raw displacement units,
/// flattened time-major.
pub fn expert_chunks(s: &[f64], spec: &MixtureTaskSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if s.len() != 2 {
        return Err(Error::DimMismatch {
            what: "condition",
            expected: 2,
            got: s.len(),
        });
    }
    let t = spec.chunk_len;
    let norm = (s[0] * s[0] + s[1] * s[1]).sqrt();
    let unit_normal = if norm > 1e-12 {
        [-s[1] / norm, s[0] / norm]
    } else {
        [0.0, 0.0]
    };
    let mut chunks = Vec::with_capacity(spec.modes_per_condition);
    for j in 1..=spec.modes_per_condition {
        let amp = mode_amplitude(j, spec.detour_amplitude);
        let waypoint = |i: usize| -> [f64; 2] {
            let u = i as f64 / t as f64;
            let b = amp * bump(u);
            [u * s[0] + b * unit_normal[0], u * s[1] + b * unit_normal[1]]
        };
        let mut chunk = Vec::with_capacity(2 * t);
        for i in 0..t {
            let w0 = waypoint(i);
            let w1 = waypoint(i + 1);
            chunk.push(w1[0] - w0[0]);
            chunk.push(w1[1] - w0[1]);
        }
        chunks.push(chunk);
    }
    Ok(chunks)
}

/// Max-over-waypoints Euclidean separation between two chunks replayed from
/// the origin.
pub fn waypoint_separation(a: &[f64], b: &[f64]) -> f64 {
    let mut pa = [0.0, 0.0];
    let mut pb = [0.0, 0.0];
    let mut worst: f64 = 0.0;
    for (ca, cb) in a.chunks_exact(2).zip(b.chunks_exact(2)) {
        pa[0] += ca[0];
        pa[1] += ca[1];
        pb[0] += cb[0];
        pb[1] += cb[1];
        let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
        worst = worst.max(d);
    }
    worst
}

/// Emits `M` expert chunks for each of `n_conditions` in-distribution
/// conditions. Bit-identical for a fixed `(spec, seed)` stream.
pub fn generate_dataset(
    spec: &MixtureTaskSpec,
    n_conditions: usize,
    rng: &mut Rng,
) -> Result<Vec<TrainingSample>> {
    spec.validate()?;
    if n_conditions == 0 {
        return Err(Error::config("dataset needs at least one condition"));
    }
    let mut samples = Vec::with_capacity(n_conditions * spec.modes_per_condition);
    for _ in 0..n_conditions {
        let s = sample_condition(Split::Id, spec, rng);
        for (idx, chunk) in expert_chunks(&s, spec)?.into_iter().enumerate() {
            samples.push(TrainingSample {
                condition: s.clone(),
                chunk,
                mode_id: idx + 1,
            });
        }
    }
    Ok(samples)
}

/// Distance from a chunk to the nearest expert mode of `s`; ties pick the
/// lower mode id (1-based).
pub fn nearest_mode_distance(
    chunk: &[f64],
    s: &[f64],
    spec: &MixtureTaskSpec,
) -> Result<(f64, usize)> {
    let modes = expert_chunks(s, spec)?;
    if chunk.len() != spec.chunk_dim() {
        return Err(Error::DimMismatch {
            what: "chunk",
            expected: spec.chunk_dim(),
            got: chunk.len(),
        });
    }
    let mut best = (f64::INFINITY, 0);
    for (idx, mode) in modes.iter().enumerate() {
        let d = chunk
            .iter()
            .zip(mode)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if d < best.0 {
            best = (d, idx + 1);
        }
    }
    Ok(best)
}

/// Point-mass simulator state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMassState {
    pub position: [f64; 2],
    pub step_index: usize,
    pub goal: [f64; 2],
}

impl PointMassState {
    pub fn at_origin(goal: [f64; 2]) -> Self {
        PointMassState {
            position: [0.0, 0.0],
            step_index: 0,
            goal,
        }
    }

    pub fn distance_to_goal(&self) -> f64 {
        ((self.position[0] - self.goal[0]).powi(2) + (self.position[1] - self.goal[1]).powi(2))
            .sqrt()
    }
}

/// Applies one clamped displacement action.
pub fn env_step(state: &PointMassState, action: [f64; 2]) -> PointMassState {
    let clamp = |v: f64| v.clamp(-ACTION_CLAMP, ACTION_CLAMP);
    PointMassState {
        position: [
            state.position[0] + clamp(action[0]),
            state.position[1] + clamp(action[1]),
        ],
        step_index: state.step_index + 1,
        goal: state.goal,
    }
}

/// Receding-horizon execution settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    /// Actions executed from each planned chunk before re-planning.
    pub exec_count: usize,
    /// Episode horizon in environment steps.
    pub t_total: usize,
    /// Goal tolerance deciding success.
    pub success_tol: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            exec_count: 8,
            t_total: 300,
            success_tol: 0.05,
        }
    }
}

/// What one planning call produced, in raw environment units.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub chunk: Vec<f64>,
    pub nfe: usize,
    pub stop_reason: Option<StopReason>,
    /// Per-refinement-step residual norms (empty for fixed-schedule heads).
    pub residuals: Vec<f64>,
    /// Scalar anomaly score for this call.
    pub score: f64,
    pub fault: Option<String>,
}

/// A planner: maps a condition to an action chunk plus its diagnostics.
pub trait Policy {
    fn plan(&self, s: &[f64], rng: &mut Rng) -> Result<PlanOutcome>;
}

/// Online anomaly monitor over per-call scores. Returns true at the first
/// flag; fresh state per episode.
pub trait Monitor {
    fn observe(&mut self, score: f64) -> bool;
}

/// Serializable summary of one planning call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRecord {
    pub call_index: usize,
    /// Environment step at which this call was made.
    pub env_step: usize,
    pub condition: Vec<f64>,
    pub nfe: usize,
    pub stop_reason: Option<StopReason>,
    pub residuals: Vec<f64>,
    pub score: f64,
    pub fault: Option<String>,
}

/// One episode: planning calls, executed actions, outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub goal: [f64; 2],
    pub split: Split,
    pub plans: Vec<PlanRecord>,
    pub actions: Vec<[f64; 2]>,
    pub success: bool,
    /// Environment step of the first monitor flag, if any.
    pub t_report: Option<usize>,
    pub t_total: usize,
    /// Environment step at which the episode ended.
    pub end_step: usize,
    pub policy_error: Option<String>,
}

/// Runs one closed-loop episode: plan from the relative target, execute a
/// prefix, repeat. A monitor flag sets `t_report` and stops the episode;
/// success is reaching the goal tolerance at or before the horizon.
pub fn rollout_episode(
    policy: &dyn Policy,
    goal: [f64; 2],
    split: Split,
    protocol: &Protocol,
    mut monitor: Option<&mut dyn Monitor>,
    rng: &mut Rng,
) -> EpisodeRecord {
    let mut state = PointMassState::at_origin(goal);
    let mut record = EpisodeRecord {
        goal,
        split,
        plans: Vec::new(),
        actions: Vec::new(),
        success: state.distance_to_goal() <= protocol.success_tol,
        t_report: None,
        t_total: protocol.t_total,
        end_step: 0,
        policy_error: None,
    };
    'episode: while !record.success && state.step_index < protocol.t_total {
        let s = vec![
            goal[0] - state.position[0],
            goal[1] - state.position[1],
        ];
        let outcome = match policy.plan(&s, rng) {
            Ok(o) => o,
            Err(e) => {
                record.policy_error = Some(e.to_string());
                break;
            }
        };
        if protocol.exec_count * 2 > outcome.chunk.len() {
            record.policy_error = Some(format!(
                "chunk with {} actions cannot cover exec_count {}",
                outcome.chunk.len() / 2,
                protocol.exec_count
            ));
            break;
        }
        record.plans.push(PlanRecord {
            call_index: record.plans.len(),
            env_step: state.step_index,
            condition: s,
            nfe: outcome.nfe,
            stop_reason: outcome.stop_reason,
            residuals: outcome.residuals.clone(),
            score: outcome.score,
            fault: outcome.fault.clone(),
        });
        if let Some(m) = monitor.as_deref_mut() {
            if m.observe(outcome.score) {
                record.t_report = Some(state.step_index);
                break;
            }
        }
        for pair in outcome.chunk.chunks_exact(2).take(protocol.exec_count) {
            let action = [pair[0], pair[1]];
            state = env_step(&state, action);
            record.actions.push(action);
            if state.distance_to_goal() <= protocol.success_tol {
                record.success = true;
                break 'episode;
            }
            if state.step_index >= protocol.t_total {
                break 'episode;
            }
        }
    }
    record.end_step = state.step_index;
    record
}
