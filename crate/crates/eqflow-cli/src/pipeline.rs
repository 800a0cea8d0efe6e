//! Shared experiment machinery: checkpoint metadata, policy construction,
//! deterministic episode batches, and metric assembly.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use eqflow::field::l2_norm;
use eqflow::infer::InferConfig;
use eqflow::net::FieldParams;
use eqflow::ood::{
    auroc, leaky_bucket_series, moving_average_series, operating_point, time_saved, FilterConfig,
    LeakyBucketMonitor, MovingAverageMonitor, OperatingPoint, ScoredPlan,
};
use eqflow::policy::{FixedStepPolicy, RefinementPolicy};
use eqflow::rng::{derive_indexed_seed, derive_seed, rng_from_seed};
use eqflow::task::{
    rollout_episode, sample_condition, EpisodeRecord, MixtureTaskSpec, Monitor, Policy, Protocol,
    Split,
};
use eqflow::train::{Head, Normalizer};

use crate::config::{worker_count, RunConfig};

/// Metadata stored inside every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptMeta {
    pub head: Head,
    pub task: MixtureTaskSpec,
    pub schedule: eqflow::schedule::DecaySchedule,
    pub normalizer: Normalizer,
    pub seed: u64,
    pub train_steps: usize,
    pub config_hash: String,
    pub version: String,
}

/// A loaded head ready to plan.
pub struct LoadedModel {
    pub params: FieldParams,
    pub meta: CkptMeta,
}

pub fn load_model(path: &std::path::Path) -> anyhow::Result<LoadedModel> {
    let (params, _spec, meta_json) =
        eqflow::ckpt::load_checkpoint_file(path).context("loading checkpoint")?;
    let meta: CkptMeta = serde_json::from_value(meta_json)
        .context("checkpoint metadata does not match this tool")?;
    Ok(LoadedModel { params, meta })
}

impl LoadedModel {
    /// Checks the checkpoint against the task geometry of a config.
    pub fn check_task(&self, task: &MixtureTaskSpec) -> anyhow::Result<()> {
        if self.meta.task != *task {
            bail!(
                "checkpoint was trained on a different task spec (chunk dim {} vs {})",
                self.meta.task.chunk_dim(),
                task.chunk_dim()
            );
        }
        Ok(())
    }

    pub fn refinement_policy(&self, infer: InferConfig) -> anyhow::Result<RefinementPolicy> {
        if self.meta.head != Head::Equilibrium {
            bail!("checkpoint head is {:?}, expected equilibrium", self.meta.head);
        }
        Ok(RefinementPolicy {
            params: self.params.clone(),
            normalizer: self.meta.normalizer.clone(),
            cond_dim: self.meta.task.cond_dim(),
            infer,
        })
    }

    pub fn fixed_step_policy(&self, n_steps: usize) -> anyhow::Result<FixedStepPolicy> {
        if self.meta.head != Head::RectifiedFlow {
            bail!(
                "checkpoint head is {:?}, expected rectified_flow",
                self.meta.head
            );
        }
        Ok(FixedStepPolicy {
            params: self.params.clone(),
            normalizer: self.meta.normalizer.clone(),
            n_steps,
            cond_dim: self.meta.task.cond_dim(),
        })
    }
}

/// Runs `n` episodes of one split. Episode `i` draws its goal and its policy
/// stream from seeds keyed by `(master_seed, split, i)` only, so different
/// policies see identical tasks. Fans out over `EQFLOW_WORKERS` threads;
/// results are ordered by index either way.
pub fn run_episodes<P: Policy + Sync>(
    policy: &P,
    task: &MixtureTaskSpec,
    split: Split,
    n: usize,
    protocol: &Protocol,
    master_seed: u64,
) -> Vec<EpisodeRecord> {
    let tag = match split {
        Split::Id => "episodes/id",
        Split::Ood => "episodes/ood",
    };
    let run_one = |i: usize| -> EpisodeRecord {
        let ep_seed = derive_indexed_seed(master_seed, tag, i as u64);
        let goal_v = sample_condition(split, task, &mut rng_from_seed(derive_seed(ep_seed, "goal")));
        let mut rng = rng_from_seed(derive_seed(ep_seed, "policy"));
        rollout_episode(
            policy,
            [goal_v[0], goal_v[1]],
            split,
            protocol,
            None,
            &mut rng,
        )
    };
    let workers = worker_count().min(n.max(1));
    if workers <= 1 {
        return (0..n).map(run_one).collect();
    }
    let mut results: Vec<Option<EpisodeRecord>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot) in results.chunks_mut(chunk).enumerate() {
            let run_one = &run_one;
            scope.spawn(move || {
                for (j, s) in slot.iter_mut().enumerate() {
                    *s = Some(run_one(w * chunk + j));
                }
            });
        }
    });
    results.into_iter().map(|r| r.unwrap()).collect()
}

/// Success and efficiency for one refinement budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: usize,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub planning_calls: usize,
    pub mean_nfe: f64,
    pub median_nfe: f64,
    /// `(nfe, count)` pairs, ascending.
    pub nfe_histogram: Vec<(usize, usize)>,
}

pub fn summarize_budget(budget: usize, records: &[EpisodeRecord]) -> BudgetRow {
    let successes = records.iter().filter(|r| r.success).count();
    let nfes: Vec<usize> = records
        .iter()
        .flat_map(|r| r.plans.iter().map(|p| p.nfe))
        .collect();
    let mut hist = std::collections::BTreeMap::new();
    for &n in &nfes {
        *hist.entry(n).or_insert(0usize) += 1;
    }
    let mean = if nfes.is_empty() {
        0.0
    } else {
        nfes.iter().sum::<usize>() as f64 / nfes.len() as f64
    };
    let median = if nfes.is_empty() {
        0.0
    } else {
        let mut v = nfes.clone();
        v.sort_unstable();
        v[v.len() / 2] as f64
    };
    BudgetRow {
        budget,
        episodes: records.len(),
        successes,
        success_rate: if records.is_empty() {
            0.0
        } else {
            successes as f64 / records.len() as f64
        },
        planning_calls: nfes.len(),
        mean_nfe: mean,
        median_nfe: median,
        nfe_histogram: hist.into_iter().collect(),
    }
}

/// Which per-call score stream a detection row uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFilter {
    Raw,
    MovingAverage,
    LeakyBucket,
}

impl ScoreFilter {
    pub const ALL: [ScoreFilter; 3] = [
        ScoreFilter::Raw,
        ScoreFilter::MovingAverage,
        ScoreFilter::LeakyBucket,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreFilter::Raw => "raw",
            ScoreFilter::MovingAverage => "moving_average",
            ScoreFilter::LeakyBucket => "leaky_bucket",
        }
    }
}

/// One detection-metrics row of the evaluation document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRow {
    pub method: String,
    pub filter: String,
    pub auroc: f64,
    pub threshold: f64,
    pub tpr: f64,
    pub tnr: f64,
    /// Fraction of interaction time avoided on OOD episodes by the online
    /// flag (filtered rows only).
    pub time_saved: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

/// Per-call score table for one method over a set of episodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTable {
    /// `(episode, call, env_step, split, raw, ma, lb)` rows in episode order,
    /// subsampled to the configured calls per episode.
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRow {
    pub episode: usize,
    pub call: usize,
    pub env_step: usize,
    pub split: Split,
    pub raw: f64,
    pub ma: f64,
    pub lb: f64,
}

/// Extracts per-call scores from episodes: the raw per-call score plus the
/// running moving-average and leaky-bucket values over each episode's call
/// sequence. When an episode has more calls than `calls_per_episode`, a
/// seeded uniform subsample is kept.
pub fn score_episodes(
    records: &[EpisodeRecord],
    filter: &FilterConfig,
    calls_per_episode: usize,
    subsample_seed: u64,
) -> ScoreTable {
    let mut rows = Vec::new();
    for (e, rec) in records.iter().enumerate() {
        let scores: Vec<f64> = rec.plans.iter().map(|p| p.score).collect();
        if scores.is_empty() {
            continue;
        }
        let ma = moving_average_series(&scores, filter);
        let lb = leaky_bucket_series(&scores, filter);
        let keep: Vec<usize> = if scores.len() <= calls_per_episode {
            (0..scores.len()).collect()
        } else {
            // Uniform J-subset without replacement, stable per episode.
            let mut rng = rng_from_seed(derive_indexed_seed(subsample_seed, "subsample", e as u64));
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut rng);
            let mut kept = idx[..calls_per_episode].to_vec();
            kept.sort_unstable();
            kept
        };
        for k in keep {
            rows.push(ScoreRow {
                episode: e,
                call: k,
                env_step: rec.plans[k].env_step,
                split: rec.split,
                raw: scores[k],
                ma: ma[k],
                lb: lb[k],
            });
        }
    }
    ScoreTable { rows }
}

fn scored_plans(table: &ScoreTable, which: ScoreFilter) -> Vec<ScoredPlan> {
    table
        .rows
        .iter()
        .map(|r| ScoredPlan {
            score: match which {
                ScoreFilter::Raw => r.raw,
                ScoreFilter::MovingAverage => r.ma,
                ScoreFilter::LeakyBucket => r.lb,
            },
            label: r.split,
            episode: r.episode,
            plan_index: r.call,
        })
        .collect()
}

/// Replays an online monitor over each episode's call scores and stamps
/// `t_report` with the environment step of the first flagged call.
pub fn replay_monitor(records: &mut [EpisodeRecord], filter: &FilterConfig, which: ScoreFilter) {
    for rec in records.iter_mut() {
        rec.t_report = None;
        let mut ma;
        let mut lb;
        let monitor: &mut dyn Monitor = match which {
            ScoreFilter::MovingAverage => {
                ma = MovingAverageMonitor::new(filter);
                &mut ma
            }
            ScoreFilter::LeakyBucket => {
                lb = LeakyBucketMonitor::new(filter);
                &mut lb
            }
            ScoreFilter::Raw => continue,
        };
        for plan in &rec.plans {
            if monitor.observe(plan.score) {
                rec.t_report = Some(plan.env_step);
                break;
            }
        }
    }
}

/// Builds the six detection rows (two methods crossed with three score
/// streams) plus time-saved numbers for the filtered streams.
pub fn detection_rows(
    method: &str,
    id_records: &[EpisodeRecord],
    ood_records: &[EpisodeRecord],
    filter: &FilterConfig,
    calls_per_episode: usize,
    target_tpr: f64,
    subsample_seed: u64,
) -> anyhow::Result<(Vec<DetectionRow>, ScoreTable)> {
    let mut all: Vec<EpisodeRecord> = Vec::with_capacity(id_records.len() + ood_records.len());
    all.extend_from_slice(id_records);
    all.extend_from_slice(ood_records);
    let table = score_episodes(&all, filter, calls_per_episode, subsample_seed);
    let mut rows = Vec::new();
    for which in ScoreFilter::ALL {
        let plans = scored_plans(&table, which);
        let pos: Vec<f64> = plans
            .iter()
            .filter(|p| p.label == Split::Ood)
            .map(|p| p.score)
            .collect();
        let neg: Vec<f64> = plans
            .iter()
            .filter(|p| p.label == Split::Id)
            .map(|p| p.score)
            .collect();
        let auc = auroc(&pos, &neg)?;
        let op: OperatingPoint = operating_point(&plans, target_tpr)?;
        let ts = match which {
            ScoreFilter::Raw => None,
            _ => {
                let mut ood = ood_records.to_vec();
                replay_monitor(&mut ood, filter, which);
                Some(time_saved(&ood))
            }
        };
        rows.push(DetectionRow {
            method: method.to_string(),
            filter: which.name().to_string(),
            auroc: auc,
            threshold: op.threshold,
            tpr: op.tpr,
            tnr: op.tnr,
            time_saved: ts,
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    Ok((rows, table))
}

/// Agreement between a trained stationary field and the quadrature oracle at
/// sampled interpolation-line points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleAgreement {
    pub points: usize,
    pub skipped_undefined: usize,
    pub median_cosine: f64,
    pub median_magnitude_rel_error: f64,
    pub cosine_quartiles: [f64; 3],
}

pub fn oracle_agreement(
    params: &FieldParams,
    normalizer: &Normalizer,
    task: &MixtureTaskSpec,
    sched: &eqflow::schedule::DecaySchedule,
    quad: &eqflow::oracle::QuadratureConfig,
    points: usize,
    seed: u64,
) -> anyhow::Result<OracleAgreement> {
    use rand::Rng as _;
    let mut rng = rng_from_seed(seed);
    let mut cosines = Vec::new();
    let mut mag_errs = Vec::new();
    let mut skipped = 0;
    for _ in 0..points {
        let s = sample_condition(Split::Id, task, &mut rng);
        let modes: Vec<(f64, Vec<f64>)> = eqflow::task::expert_chunks(&s, task)?
            .into_iter()
            .map(|m| anyhow::Ok((1.0, normalizer.normalize(&m)?)))
            .collect::<anyhow::Result<_>>()?;
        let j = rng.gen_range(0..modes.len());
        let gamma: f64 = rng.gen_range(0.0..1.0);
        let eps = eqflow::rng::normal_vec(&mut rng, task.chunk_dim());
        let x: Vec<f64> = modes[j]
            .1
            .iter()
            .zip(&eps)
            .map(|(m, e)| gamma * m + (1.0 - gamma) * e)
            .collect();
        let f_net = eqflow::field::eval_field(params, &x, &s)?;
        let f_star = match eqflow::oracle::posterior_field(&modes, &x, sched, quad) {
            Ok(f) => f,
            Err(eqflow::Error::OracleUndefined(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let nn = l2_norm(&f_net);
        let ns = l2_norm(&f_star);
        if nn == 0.0 || ns == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = f_net.iter().zip(&f_star).map(|(a, b)| a * b).sum();
        cosines.push(dot / (nn * ns));
        mag_errs.push((nn - ns).abs() / ns);
    }
    if cosines.is_empty() {
        return Ok(OracleAgreement {
            points,
            skipped_undefined: skipped,
            median_cosine: 0.0,
            median_magnitude_rel_error: f64::INFINITY,
            cosine_quartiles: [0.0; 3],
        });
    }
    cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mag_errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |v: &[f64], p: f64| v[(p * (v.len() - 1) as f64).round() as usize];
    Ok(OracleAgreement {
        points,
        skipped_undefined: skipped,
        median_cosine: q(&cosines, 0.5),
        median_magnitude_rel_error: q(&mag_errs, 0.5),
        cosine_quartiles: [q(&cosines, 0.25), q(&cosines, 0.5), q(&cosines, 0.75)],
    })
}

/// Builds the dataset, trains the configured head, and returns the artifacts.
pub fn train_from_config(config: &RunConfig) -> anyhow::Result<(FieldParams, CkptMeta, eqflow::train::TrainingLog)> {
    let mut data_rng = rng_from_seed(derive_seed(config.seed, "dataset"));
    let dataset = eqflow::task::generate_dataset(&config.task, config.train_conditions, &mut data_rng)?;
    let net = eqflow::train::head_network_spec(
        config.train.head,
        config.task.chunk_dim(),
        config.task.cond_dim(),
        config.network.hidden_dims.clone(),
        config.network.activation,
    );
    let train_cfg = eqflow::train::TrainConfig {
        head: config.train.head,
        steps: config.train.steps,
        batch_size: config.train.batch_size.min(dataset.len()),
        optimizer: config.train.optimizer,
        schedule: config.schedule,
        seed: derive_seed(config.seed, "train"),
        log_every: config.train.log_every,
    };
    let out = eqflow::train::train(&train_cfg, &dataset, &net)?;
    if let Some(step) = out.log.diverged_at {
        bail!("training diverged at step {step}");
    }
    let meta = CkptMeta {
        head: config.train.head,
        task: config.task,
        schedule: config.schedule,
        normalizer: out.normalizer,
        seed: config.seed,
        train_steps: config.train.steps,
        config_hash: config.short_hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok((out.params, meta, out.log))
}
