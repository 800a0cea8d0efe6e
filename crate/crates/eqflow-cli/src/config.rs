//! Run configuration: one TOML file drives training, rollouts, and the
//! detection evaluation. Unknown keys are hard errors so a typo in a
//! hyperparameter name cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use eqflow::infer::InferConfig;
use eqflow::net::Activation;
use eqflow::ood::FilterConfig;
use eqflow::optim::AdamHyper;
use eqflow::schedule::DecaySchedule;
use eqflow::task::{MixtureTaskSpec, Protocol};
use eqflow::train::Head;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stream (init, data, noise, episodes) derives from it.
    pub seed: u64,
    /// Root for run directories. `EQFLOW_OUT_ROOT` overrides it.
    pub out_root: PathBuf,
    pub task: MixtureTaskSpec,
    /// Conditions in the generated training set (each emits all modes).
    pub train_conditions: usize,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub schedule: DecaySchedule,
    pub infer: InferConfig,
    pub filter: FilterConfig,
    pub protocol: Protocol,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_root: PathBuf::from("runs"),
            task: MixtureTaskSpec::default(),
            train_conditions: 512,
            network: NetworkSection::default(),
            train: TrainSection::default(),
            schedule: DecaySchedule::default(),
            infer: InferConfig::default(),
            filter: FilterConfig::default(),
            protocol: Protocol::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            hidden_dims: vec![256, 256, 256],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub head: Head,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamHyper,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            head: Head::Equilibrium,
            steps: 20_000,
            batch_size: 64,
            optimizer: AdamHyper::default(),
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub id_episodes: usize,
    pub ood_episodes: usize,
    /// Planning calls scored per episode (fewer are all used).
    pub calls_per_episode: usize,
    /// Refinement budget for anomaly-scoring runs.
    pub ood_k_max: usize,
    /// Euler steps of the fixed-schedule baseline.
    pub rf_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            id_episodes: 500,
            ood_episodes: 500,
            calls_per_episode: 20,
            ood_k_max: 10,
            rf_steps: 20,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.task.validate()?;
        self.schedule.validate()?;
        self.infer.validate()?;
        self.filter.validate()?;
        if self.train_conditions == 0 {
            bail!("train_conditions must be >= 1");
        }
        if self.train.batch_size == 0 || self.train.log_every == 0 {
            bail!("train.batch_size and train.log_every must be >= 1");
        }
        if self.network.hidden_dims.contains(&0) {
            bail!("network.hidden_dims entries must be >= 1");
        }
        if self.protocol.exec_count == 0 || self.protocol.exec_count > self.task.chunk_len {
            bail!(
                "protocol.exec_count must lie in 1..={} (the chunk length)",
                self.task.chunk_len
            );
        }
        if self.eval.ood_k_max == 0 || self.eval.rf_steps == 0 || self.eval.calls_per_episode == 0
        {
            bail!("eval.ood_k_max, eval.rf_steps, eval.calls_per_episode must be >= 1");
        }
        Ok(())
    }

    /// Out root after the environment override.
    pub fn effective_out_root(&self) -> PathBuf {
        match std::env::var_os("EQFLOW_OUT_ROOT") {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_root.clone(),
        }
    }

    /// Canonical serialized form, used for the run-directory hash.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short stable digest of the resolved config.
    pub fn short_hash(&self) -> String {
        let text = self.canonical_toml();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h = (h ^ u64::from(*b)).wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")[..10].to_string()
    }
}

/// Worker-pool size for episode evaluation: `EQFLOW_WORKERS`, default 1.
pub fn worker_count() -> usize {
    std::env::var("EQFLOW_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("sead = 3").unwrap_err();
        assert!(err.to_string().contains("sead"));
        let err = toml::from_str::<RunConfig>("[train]\nlr = 0.1").unwrap_err();
        assert!(err.to_string().contains("lr"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.short_hash(), b.short_hash());
        b.seed = 1;
        assert_ne!(a.short_hash(), b.short_hash());
    }

    #[test]
    fn exec_count_must_fit_the_chunk() {
        let mut cfg = RunConfig::default();
        cfg.protocol.exec_count = 17;
        assert!(cfg.validate().is_err());
    }
}
