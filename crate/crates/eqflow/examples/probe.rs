//! Scratch calibration probe: training throughput, convergence behavior,
//! oracle agreement, and ID/OOD score separation at a few onsets.

use std::time::Instant;

use eqflow::field::{eval_field, l2_norm};
use eqflow::infer::{refine, InferConfig, NetField, StopReason};
use eqflow::net::Activation;
use eqflow::oracle::{posterior_field, QuadratureConfig};
use eqflow::rng::{derive_seed, normal_vec, rng_from_seed};
use eqflow::schedule::DecaySchedule;
use eqflow::task::{
    expert_chunks, generate_dataset, nearest_mode_distance, sample_condition, MixtureTaskSpec,
    Split,
};
use eqflow::train::{head_network_spec, train, Head, TrainConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let onset: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.8);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let hidden: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(128);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let conditions: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(512);

    let task = MixtureTaskSpec::default();
    let sched = DecaySchedule { scale: 4.0, onset };
    let mut rng = rng_from_seed(derive_seed(7, "dataset"));
    let dataset = generate_dataset(&task, conditions, &mut rng).unwrap();
    println!("dataset: {} samples, chunk dim {}", dataset.len(), task.chunk_dim());

    let cfg = TrainConfig {
        head: Head::Equilibrium,
        steps,
        batch_size: 64,
        optimizer: eqflow::optim::AdamHyper {
            lr,
            ..Default::default()
        },
        schedule: sched,
        seed: 7,
        ..TrainConfig::default()
    };
    let net = head_network_spec(
        Head::Equilibrium,
        task.chunk_dim(),
        task.cond_dim(),
        vec![hidden, hidden, hidden],
        Activation::Tanh,
    );
    let t0 = Instant::now();
    let out = train(&cfg, &dataset, &net).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "train: {steps} steps in {dt:.1}s ({:.0} steps/s), loss {} -> {}",
        steps as f64 / dt,
        out.log.entries.first().unwrap().loss,
        out.log.entries.last().unwrap().loss
    );

    // Criterion-4 style equilibrium check on this (multimodal) dataset.
    let mut rng = rng_from_seed(123);
    let mut norm_at_expert = 0.0;
    let mut norm_at_noise = 0.0;
    for _ in 0..100 {
        let s = sample_condition(Split::Id, &task, &mut rng);
        let chunks = expert_chunks(&s, &task).unwrap();
        let a_norm = out.normalizer.normalize(&chunks[0]).unwrap();
        let eps = normal_vec(&mut rng, task.chunk_dim());
        norm_at_expert += l2_norm(&eval_field(&out.params, &a_norm, &s).unwrap());
        norm_at_noise += l2_norm(&eval_field(&out.params, &eps, &s).unwrap());
    }
    println!(
        "equilibrium: mean |f(a*,s)| = {:.4}, mean |f(eps,s)| = {:.4}, ratio {:.4}",
        norm_at_expert / 100.0,
        norm_at_noise / 100.0,
        norm_at_expert / norm_at_noise
    );

    // Criterion-6 style convergence at K_max = 30.
    let infer_cfg = InferConfig::default();
    let field = NetField::new(&out.params, 2).unwrap();
    let mut converged = 0;
    let mut near = 0;
    let mut nfes = Vec::new();
    let mut rng = rng_from_seed(55);
    let total = 50 * 64;
    for _ in 0..50 {
        let s = sample_condition(Split::Id, &task, &mut rng);
        let modes = expert_chunks(&s, &task).unwrap();
        let modes_norm: Vec<Vec<f64>> = modes
            .iter()
            .map(|m| out.normalizer.normalize(m).unwrap())
            .collect();
        for _ in 0..64 {
            let (chunk, trace) = refine(&field, &s, &infer_cfg, &mut rng).unwrap();
            nfes.push(trace.nfe as f64);
            if trace.stop_reason == StopReason::Converged {
                converged += 1;
                let d = modes_norm
                    .iter()
                    .map(|m| {
                        chunk
                            .iter()
                            .zip(m)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                if d < 0.1 {
                    near += 1;
                }
            }
        }
    }
    println!(
        "convergence: {:.1}% converged, {:.1}% converged-and-near, nfe mean {:.2} median {}",
        100.0 * converged as f64 / total as f64,
        100.0 * near as f64 / total as f64,
        nfes.iter().sum::<f64>() / nfes.len() as f64,
        median(nfes.clone())
    );

    // Oracle cosine agreement at 200 interpolation points.
    let quad = QuadratureConfig::default();
    let mut rng = rng_from_seed(77);
    let mut cosines = Vec::new();
    for _ in 0..200 {
        let s = sample_condition(Split::Id, &task, &mut rng);
        let modes = expert_chunks(&s, &task).unwrap();
        let modes_norm: Vec<(f64, Vec<f64>)> = modes
            .iter()
            .map(|m| (1.0, out.normalizer.normalize(m).unwrap()))
            .collect();
        use rand::Rng as _;
        let j = rng.gen_range(0..modes_norm.len());
        let gamma: f64 = rng.gen_range(0.0..1.0);
        let eps = normal_vec(&mut rng, task.chunk_dim());
        let x: Vec<f64> = modes_norm[j]
            .1
            .iter()
            .zip(&eps)
            .map(|(m, e)| gamma * m + (1.0 - gamma) * e)
            .collect();
        let f_net = eval_field(&out.params, &x, &s).unwrap();
        let f_star = posterior_field(&modes_norm, &x, &sched, &quad).unwrap();
        let dot: f64 = f_net.iter().zip(&f_star).map(|(a, b)| a * b).sum();
        let cos = dot / (l2_norm(&f_net) * l2_norm(&f_star)).max(1e-300);
        cosines.push(cos);
    }
    println!("oracle: median cosine {:.4}", median(cosines));

    // ID vs OOD separation with the anomaly-run budget.
    let ood_cfg = InferConfig {
        k_max: 10,
        ..InferConfig::default()
    };
    let mut rng = rng_from_seed(99);
    let mut id_scores = Vec::new();
    let mut ood_scores = Vec::new();
    for _ in 0..300 {
        let s = sample_condition(Split::Id, &task, &mut rng);
        let (_, trace) = refine(&field, &s, &ood_cfg, &mut rng).unwrap();
        id_scores.push(*trace.residuals.last().unwrap());
        let s = sample_condition(Split::Ood, &task, &mut rng);
        let (_, trace) = refine(&field, &s, &ood_cfg, &mut rng).unwrap();
        ood_scores.push(*trace.residuals.last().unwrap());
    }
    let auroc = eqflow::ood::auroc(&ood_scores, &id_scores).unwrap();
    println!(
        "ood (fresh conditions): id median {:.3}, ood median {:.3}, auroc {:.4}",
        median(id_scores.clone()),
        median(ood_scores.clone()),
        auroc
    );

    // Score profile at small radii, as seen late in a rollout.
    let mut rng = rng_from_seed(101);
    for radius in [0.45, 0.25, 0.12, 0.06] {
        let mut scores = Vec::new();
        let mut dists = Vec::new();
        for _ in 0..100 {
            use rand::Rng as _;
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let s = vec![radius * th.cos(), radius * th.sin()];
            let (chunk, trace) = refine(&field, &s, &ood_cfg, &mut rng).unwrap();
            scores.push(*trace.residuals.last().unwrap());
            let raw = out.normalizer.denormalize(&chunk).unwrap();
            let (d, _) = nearest_mode_distance(&raw, &s, &task).unwrap();
            dists.push(d);
        }
        println!(
            "  radius {radius}: median score {:.3}, median raw mode distance {:.4}",
            median(scores.clone()),
            median(dists.clone())
        );
    }
}
