//! Subcommand implementations. Each writes its artifacts under a run
//! directory named by the resolved config hash and seed, so identical
//! invocations land in identical places with identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use eqflow::infer::InferConfig;
use eqflow::net::{
    backward, finite_difference_grad, forward, init_network, max_relative_error, NetworkSpec,
};
use eqflow::oracle::QuadratureConfig;
use eqflow::rf::{euler_sample, point_field};
use eqflow::rng::{derive_seed, normal_vec, rng_from_seed};
use eqflow::task::Split;
use eqflow::train::Head;

use crate::config::RunConfig;
use crate::pipeline::{
    self, detection_rows, load_model, run_episodes, summarize_budget, BudgetRow, DetectionRow,
    ScoreTable,
};

/// Exit code used when a verification command found a violation.
pub const CHECK_FAILED: i32 = 3;

fn ensure_run_dir(config: &RunConfig, kind: &str) -> anyhow::Result<PathBuf> {
    let dir = config
        .effective_out_root()
        .join(format!("{kind}-{}-s{}", config.short_hash(), config.seed));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.canonical_toml())?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Stamp written next to every training run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunStamp {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub head: Head,
    pub checkpoint_sha256: String,
    pub parameter_count: usize,
    pub final_loss: Option<f64>,
}

pub fn cmd_train(config_path: &Path) -> anyhow::Result<PathBuf> {
    let config = RunConfig::load(config_path)?;
    let kind = match config.train.head {
        Head::Equilibrium => "train-equilibrium",
        Head::RectifiedFlow => "train-rf",
    };
    let dir = ensure_run_dir(&config, kind)?;
    let (params, meta, log) = pipeline::train_from_config(&config)?;
    let ckpt_path = dir.join("checkpoint.bin");
    eqflow::ckpt::save_checkpoint_file(
        &ckpt_path,
        &params,
        &params.network_spec(),
        &serde_json::to_value(&meta)?,
    )?;
    fs::write(dir.join("train_log.csv"), log.to_csv())?;
    let stamp = RunStamp {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.short_hash(),
        seed: config.seed,
        head: config.train.head,
        checkpoint_sha256: sha256_file(&ckpt_path)?,
        parameter_count: params.parameter_count(),
        final_loss: log.entries.last().map(|e| e.loss),
    };
    write_json(&dir.join("run.json"), &stamp)?;
    eprintln!(
        "trained {:?} head: {} params, final loss {:?}",
        config.train.head,
        params.parameter_count(),
        stamp.final_loss
    );
    println!("{}", dir.display());
    Ok(dir)
}

/// Summary document for a budget-sweep rollout.
#[derive(Debug, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub split: Split,
    pub episodes: usize,
    pub head: Head,
    pub rows: Vec<BudgetRow>,
}

impl RolloutSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "budget,episodes,successes,success_rate,planning_calls,mean_nfe,median_nfe,distinct_nfe_values\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{:.4},{},{}\n",
                r.budget,
                r.episodes,
                r.successes,
                r.success_rate,
                r.planning_calls,
                r.mean_nfe,
                r.median_nfe,
                r.nfe_histogram.len()
            ));
        }
        out
    }
}

pub fn cmd_rollout(
    config_path: &Path,
    checkpoint: &Path,
    budgets: &[usize],
    split: Split,
    episodes: usize,
) -> anyhow::Result<(PathBuf, RolloutSummary)> {
    let config = RunConfig::load(config_path)?;
    if budgets.is_empty() {
        bail!("at least one --budget is required");
    }
    let model = load_model(checkpoint)?;
    model.check_task(&config.task)?;
    let dir = ensure_run_dir(&config, &format!("rollout-{}", split_name(split)))?;
    let mut rows = Vec::new();
    for &budget in budgets {
        if budget == 0 {
            bail!("budgets must be >= 1");
        }
        let records = match model.meta.head {
            Head::Equilibrium => {
                let policy = model.refinement_policy(InferConfig {
                    k_max: budget,
                    ..config.infer.clone()
                })?;
                run_episodes(
                    &policy,
                    &config.task,
                    split,
                    episodes,
                    &config.protocol,
                    config.seed,
                )
            }
            Head::RectifiedFlow => {
                let policy = model.fixed_step_policy(budget)?;
                run_episodes(
                    &policy,
                    &config.task,
                    split,
                    episodes,
                    &config.protocol,
                    config.seed,
                )
            }
        };
        let mut jsonl = String::new();
        for rec in &records {
            jsonl.push_str(&serde_json::to_string(rec)?);
            jsonl.push('\n');
        }
        fs::write(
            dir.join(format!("episodes-{}-b{budget}.jsonl", split_name(split))),
            jsonl,
        )?;
        rows.push(summarize_budget(budget, &records));
    }
    let summary = RolloutSummary {
        split,
        episodes,
        head: model.meta.head,
        rows,
    };
    write_json(&dir.join("rollout_summary.json"), &summary)?;
    fs::write(dir.join("rollout_summary.csv"), summary.to_csv())?;
    println!("{}", dir.display());
    Ok((dir, summary))
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Id => "id",
        Split::Ood => "ood",
    }
}

/// Full detection-evaluation document.
#[derive(Debug, Serialize, Deserialize)]
pub struct OodSummary {
    pub id_episodes: usize,
    pub ood_episodes: usize,
    pub calls_per_episode: usize,
    pub rows: Vec<DetectionRow>,
}

impl OodSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,filter,auroc,threshold,tpr,tnr,time_saved,positives,negatives\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.9},{:.6},{:.6},{},{},{}\n",
                r.method,
                r.filter,
                r.auroc,
                r.threshold,
                r.tpr,
                r.tnr,
                r.time_saved.map_or(String::new(), |t| format!("{t:.6}")),
                r.positives,
                r.negatives
            ));
        }
        out
    }

    pub fn row(&self, method: &str, filter: &str) -> Option<&DetectionRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.filter == filter)
    }
}

fn scores_csv(table: &ScoreTable) -> String {
    let mut out = String::from("episode,call,env_step,split,raw,ma,lb\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{:.9},{:.9},{:.9}\n",
            r.episode,
            r.call,
            r.env_step,
            split_name(r.split),
            r.raw,
            r.ma,
            r.lb
        ));
    }
    out
}

pub fn cmd_eval_ood(
    config_path: &Path,
    checkpoint: &Path,
    baseline: &Path,
) -> anyhow::Result<(PathBuf, OodSummary)> {
    let config = RunConfig::load(config_path)?;
    let model = load_model(checkpoint)?;
    let base = load_model(baseline)?;
    model.check_task(&config.task)?;
    base.check_task(&config.task)?;
    if model.meta.head != Head::Equilibrium || base.meta.head != Head::RectifiedFlow {
        bail!("eval-ood expects an equilibrium checkpoint and a rectified_flow baseline");
    }
    let dir = ensure_run_dir(&config, "eval-ood")?;

    let infer = InferConfig {
        k_max: config.eval.ood_k_max,
        ..config.infer.clone()
    };
    let eq_policy = model.refinement_policy(infer)?;
    let rf_policy = base.fixed_step_policy(config.eval.rf_steps)?;

    let mut rows = Vec::new();
    let mut summary_tables = Vec::new();
    for (method, id_records, ood_records) in [
        (
            "equilibrium_final_norm",
            run_episodes(
                &eq_policy,
                &config.task,
                Split::Id,
                config.eval.id_episodes,
                &config.protocol,
                config.seed,
            ),
            run_episodes(
                &eq_policy,
                &config.task,
                Split::Ood,
                config.eval.ood_episodes,
                &config.protocol,
                config.seed,
            ),
        ),
        (
            "rf_loss_proxy",
            run_episodes(
                &rf_policy,
                &config.task,
                Split::Id,
                config.eval.id_episodes,
                &config.protocol,
                config.seed,
            ),
            run_episodes(
                &rf_policy,
                &config.task,
                Split::Ood,
                config.eval.ood_episodes,
                &config.protocol,
                config.seed,
            ),
        ),
    ] {
        let (method_rows, table) = detection_rows(
            method,
            &id_records,
            &ood_records,
            &config.filter,
            config.eval.calls_per_episode,
            0.9,
            derive_seed(config.seed, method),
        )?;
        fs::write(dir.join(format!("ood_scores-{method}.csv")), scores_csv(&table))?;
        rows.extend(method_rows);
        summary_tables.push((method, table.rows.len()));
    }
    let summary = OodSummary {
        id_episodes: config.eval.id_episodes,
        ood_episodes: config.eval.ood_episodes,
        calls_per_episode: config.eval.calls_per_episode,
        rows,
    };
    write_json(&dir.join("ood_summary.json"), &summary)?;
    fs::write(dir.join("ood_metrics.csv"), summary.to_csv())?;
    for (method, n) in summary_tables {
        eprintln!("{method}: {n} scored planning calls");
    }
    println!("{}", dir.display());
    Ok((dir, summary))
}

/// Oracle-agreement report: integrator exactness plus (when a trained
/// checkpoint is supplied) field-vs-quadrature statistics.
#[derive(Debug, Serialize, Deserialize)]
pub struct OracleReport {
    pub euler_max_error: f64,
    pub euler_ok: bool,
    pub agreement: Option<pipeline::OracleAgreement>,
    pub quad_vs_mc_max_rel: Option<f64>,
}

pub fn cmd_oracle_check(
    config_path: &Path,
    checkpoint: Option<&Path>,
    points: usize,
    mc_points: usize,
    mc_samples: usize,
    min_cosine: Option<f64>,
) -> anyhow::Result<(PathBuf, OracleReport, i32)> {
    let config = RunConfig::load(config_path)?;
    let dir = ensure_run_dir(&config, "oracle-check")?;

    // Integrator exactness on the closed-form one-point field.
    let mut rng = rng_from_seed(derive_seed(config.seed, "oracle/euler"));
    let mut euler_max: f64 = 0.0;
    for _ in 0..100 {
        let a_star = normal_vec(&mut rng, config.task.chunk_dim());
        for n_steps in [1usize, 5, 20] {
            let start = normal_vec(&mut rng, config.task.chunk_dim());
            let out = euler_sample(|x, g| point_field(x, g, &a_star), n_steps, start)?;
            let err = out
                .iter()
                .zip(&a_star)
                .map(|(o, a)| (o - a) * (o - a))
                .sum::<f64>()
                .sqrt();
            euler_max = euler_max.max(err);
        }
    }
    let euler_ok = euler_max < 1e-9;

    let mut agreement = None;
    let mut quad_vs_mc = None;
    if let Some(ckpt) = checkpoint {
        let model = load_model(ckpt)?;
        model.check_task(&config.task)?;
        if model.meta.head != Head::Equilibrium {
            bail!("oracle-check needs an equilibrium checkpoint");
        }
        agreement = Some(pipeline::oracle_agreement(
            &model.params,
            &model.meta.normalizer,
            &config.task,
            &model.meta.schedule,
            &QuadratureConfig::default(),
            points,
            derive_seed(config.seed, "oracle/points"),
        )?);
        if mc_points > 0 {
            let mut worst: f64 = 0.0;
            let mut rng = rng_from_seed(derive_seed(config.seed, "oracle/mc"));
            use rand::Rng as _;
            for _ in 0..mc_points {
                let s = eqflow::task::sample_condition(Split::Id, &config.task, &mut rng);
                let modes: Vec<(f64, Vec<f64>)> = eqflow::task::expert_chunks(&s, &config.task)?
                    .into_iter()
                    .map(|m| anyhow::Ok((1.0, model.meta.normalizer.normalize(&m)?)))
                    .collect::<anyhow::Result<_>>()?;
                let j = rng.gen_range(0..modes.len());
                let gamma: f64 = rng.gen_range(0.1..0.9);
                let eps = normal_vec(&mut rng, config.task.chunk_dim());
                let x: Vec<f64> = modes[j]
                    .1
                    .iter()
                    .zip(&eps)
                    .map(|(m, e)| gamma * m + (1.0 - gamma) * e)
                    .collect();
                let quad_cfg = QuadratureConfig { nodes: 2048 };
                let fq =
                    eqflow::oracle::posterior_field(&modes, &x, &model.meta.schedule, &quad_cfg)?;
                let fm = eqflow::oracle::posterior_field_mc(
                    &modes,
                    &x,
                    &model.meta.schedule,
                    mc_samples,
                    &mut rng,
                )?;
                let diff: f64 = fq
                    .iter()
                    .zip(&fm)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let denom = fq.iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(diff / denom);
            }
            quad_vs_mc = Some(worst);
        }
    }

    let report = OracleReport {
        euler_max_error: euler_max,
        euler_ok,
        agreement,
        quad_vs_mc_max_rel: quad_vs_mc,
    };
    write_json(&dir.join("oracle_report.json"), &report)?;
    let mut code = 0;
    if !euler_ok {
        eprintln!("FAIL: euler arrival error {euler_max:.3e} exceeds 1e-9");
        code = CHECK_FAILED;
    }
    if let (Some(min), Some(agree)) = (min_cosine, &report.agreement) {
        if agree.median_cosine < min {
            eprintln!(
                "FAIL: median cosine {:.4} below required {min}",
                agree.median_cosine
            );
            code = CHECK_FAILED;
        }
    }
    println!("{}", dir.display());
    Ok((dir, report, code))
}

/// Gradient check over freshly initialized random networks.
#[derive(Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub nets: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn cmd_gradcheck(
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
    nets: usize,
    seed: u64,
) -> anyhow::Result<(GradcheckReport, i32)> {
    let tolerance = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..nets {
        let spec = NetworkSpec {
            input_dim,
            hidden_dims: hidden.to_vec(),
            output_dim,
            activation: if i % 2 == 0 {
                eqflow::net::Activation::Tanh
            } else {
                eqflow::net::Activation::Softplus
            },
        };
        let net_seed = derive_seed(seed, &format!("gradcheck/{i}"));
        let params = init_network(&spec, net_seed)?;
        let mut rng = rng_from_seed(derive_seed(net_seed, "data"));
        let x = normal_vec(&mut rng, input_dim);
        let g = normal_vec(&mut rng, output_dim);
        let (_, cache) = forward(&params, &x)?;
        let (analytic, _) = backward(&params, &cache, &g)?;
        let fd = finite_difference_grad(
            &params,
            |p| {
                let (out, _) = forward(p, &x)?;
                Ok(out.iter().zip(&g).map(|(o, gg)| o * gg).sum())
            },
            1e-4,
        )?;
        worst = worst.max(max_relative_error(&analytic, &fd));
    }
    let pass = worst < tolerance;
    let report = GradcheckReport {
        nets,
        max_relative_error: worst,
        tolerance,
        pass,
    };
    println!(
        "gradcheck: {} nets, max relative error {:.3e} (tolerance {:.0e}) -> {}",
        nets,
        worst,
        tolerance,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok((report, if pass { 0 } else { CHECK_FAILED }))
}

/// Aggregates run directories into one comparison table on stdout.
pub fn cmd_report(roots: &[PathBuf]) -> anyhow::Result<String> {
    let mut lines = vec!["run,kind,key,value".to_string()];
    let mut dirs: Vec<PathBuf> = Vec::new();
    for root in roots {
        if root.join("config.toml").exists() {
            dirs.push(root.clone());
        } else if root.is_dir() {
            for entry in fs::read_dir(root)? {
                let p = entry?.path();
                if p.join("config.toml").exists() {
                    dirs.push(p);
                }
            }
        }
    }
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        if let Ok(text) = fs::read_to_string(dir.join("run.json")) {
            if let Ok(stamp) = serde_json::from_str::<RunStamp>(&text) {
                lines.push(format!("{name},train,checkpoint_sha256,{}", stamp.checkpoint_sha256));
                if let Some(l) = stamp.final_loss {
                    lines.push(format!("{name},train,final_loss,{l}"));
                }
            }
        }
        if let Ok(text) = fs::read_to_string(dir.join("rollout_summary.json")) {
            if let Ok(s) = serde_json::from_str::<RolloutSummary>(&text) {
                for row in &s.rows {
                    lines.push(format!(
                        "{name},rollout,budget{}_success_rate,{:.6}",
                        row.budget, row.success_rate
                    ));
                    lines.push(format!(
                        "{name},rollout,budget{}_mean_nfe,{:.4}",
                        row.budget, row.mean_nfe
                    ));
                }
            }
        }
        if let Ok(text) = fs::read_to_string(dir.join("ood_summary.json")) {
            if let Ok(s) = serde_json::from_str::<OodSummary>(&text) {
                for row in &s.rows {
                    lines.push(format!(
                        "{name},eval-ood,{}_{}_auroc,{:.6}",
                        row.method, row.filter, row.auroc
                    ));
                }
            }
        }
    }
    let table = lines.join("\n") + "\n";
    print!("{table}");
    Ok(table)
}
