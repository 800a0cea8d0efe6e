//! Property tests for the contracts that hold over whole input families,
//! not just the worked examples.

use proptest::prelude::*;

use eqflow::ckpt::{load_checkpoint, save_checkpoint};
use eqflow::field::interpolate;
use eqflow::infer::{refine, InferConfig, InitDist, VelocityField};
use eqflow::net::{init_network, NetworkSpec};
use eqflow::ood::{auroc, leaky_bucket_flag, moving_average_flag, FilterConfig};
use eqflow::rng::rng_from_seed;
use eqflow::schedule::{c_of_gamma, eta_of_step, DecaySchedule, StepSizeTable};
use eqflow::train::{fit_normalizer, Normalizer};

fn sched_strategy() -> impl Strategy<Value = DecaySchedule> {
    (0.01f64..50.0, 0.0f64..0.99).prop_map(|(scale, onset)| DecaySchedule { scale, onset })
}

proptest! {
    #[test]
    fn decay_is_nonincreasing_continuous_and_vanishes(sched in sched_strategy(), g in 0.0f64..=1.0) {
        let c1 = c_of_gamma(g, &sched).unwrap();
        prop_assert!(c1 >= 0.0);
        // Non-increasing against a second point.
        let g2 = (g + 0.05).min(1.0);
        let c2 = c_of_gamma(g2, &sched).unwrap();
        prop_assert!(c2 <= c1 + 1e-12);
        // Vanishes at the data end.
        prop_assert_eq!(c_of_gamma(1.0, &sched).unwrap(), 0.0);
        // Constant slope property past the onset.
        if g > sched.onset && g < 1.0 {
            let ratio = c1 / (1.0 - g);
            prop_assert!((ratio - sched.attractor_slope()).abs() < 1e-9 * sched.attractor_slope());
        }
    }

    #[test]
    fn step_table_clamps_beyond_last_range(k in 1usize..200) {
        let table = StepSizeTable::default();
        let eta = eta_of_step(k, &table).unwrap();
        if k > 30 {
            prop_assert_eq!(eta, 0.01);
        }
        prop_assert!(eta > 0.0);
    }

    #[test]
    fn interpolation_endpoints_and_convexity(
        a in proptest::collection::vec(-3.0f64..3.0, 1..12),
        seed in 0u64..1000,
        gamma in 0.0f64..=1.0,
    ) {
        let eps = eqflow::rng::normal_vec(&mut rng_from_seed(seed), a.len());
        let x = interpolate(&a, &eps, gamma).unwrap();
        for i in 0..a.len() {
            let lo = a[i].min(eps[i]);
            let hi = a[i].max(eps[i]);
            prop_assert!(x[i] >= lo - 1e-12 && x[i] <= hi + 1e-12);
        }
        prop_assert_eq!(interpolate(&a, &eps, 1.0).unwrap(), a.clone());
        prop_assert_eq!(interpolate(&a, &eps, 0.0).unwrap(), eps);
    }

    #[test]
    fn auroc_is_invariant_under_monotone_transforms(
        pos in proptest::collection::vec(0.0f64..5.0, 1..30),
        neg in proptest::collection::vec(0.0f64..5.0, 1..30),
    ) {
        let base = auroc(&pos, &neg).unwrap();
        let warp = |v: f64| (v * 1.7).exp() + 3.0 * v;
        let wp: Vec<f64> = pos.iter().map(|&v| warp(v)).collect();
        let wn: Vec<f64> = neg.iter().map(|&v| warp(v)).collect();
        let warped = auroc(&wp, &wn).unwrap();
        prop_assert!((base - warped).abs() < 1e-9);
        // Complement identity with tie correction.
        let flipped = auroc(&neg, &pos).unwrap();
        prop_assert!((base + flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bucket_never_flags_below_dead_zone(
        scores in proptest::collection::vec(0.0f64..0.5, 1..40),
        spike in 1.3f64..10.0,
    ) {
        let cfg = FilterConfig::default();
        prop_assert_eq!(leaky_bucket_flag(&scores, &cfg), (false, None));
        // One spike with excess above the trigger level flags immediately.
        prop_assert_eq!(leaky_bucket_flag(&[spike], &cfg), (true, Some(1)));
    }

    #[test]
    fn moving_average_trigger_is_monotone_in_threshold(
        scores in proptest::collection::vec(0.0f64..2.0, 1..30),
        tau_lo in 0.1f64..1.0,
        bump in 0.01f64..1.0,
    ) {
        let lo = FilterConfig { tau_ma: tau_lo, ..FilterConfig::default() };
        let hi = FilterConfig { tau_ma: tau_lo + bump, ..FilterConfig::default() };
        let (_, k_lo) = moving_average_flag(&scores, &lo);
        let (_, k_hi) = moving_average_flag(&scores, &hi);
        match (k_lo, k_hi) {
            (None, Some(_)) => prop_assert!(false, "raising the threshold created a flag"),
            (Some(a), Some(b)) => prop_assert!(a <= b),
            _ => {}
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        input in 1usize..6,
        hidden in proptest::collection::vec(1usize..10, 0..3),
        output in 1usize..6,
        seed in 0u64..500,
    ) {
        let spec = NetworkSpec::new(input, hidden, output);
        let params = init_network(&spec, seed).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &params, &spec, &serde_json::json!({"seed": seed})).unwrap();
        let (loaded, lspec, _) = load_checkpoint(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(lspec, spec);
        prop_assert!(params.flat_iter().zip(loaded.flat_iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn normalizer_round_trip_is_identity(
        chunks in proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, 4), 1..20),
    ) {
        let samples: Vec<_> = chunks
            .iter()
            .map(|c| eqflow::field::TrainingSample {
                condition: vec![0.0],
                chunk: c.clone(),
                mode_id: 1,
            })
            .collect();
        let n: Normalizer = fit_normalizer(&samples).unwrap();
        for c in &chunks {
            let back = n.denormalize(&n.normalize(c).unwrap()).unwrap();
            for (a, b) in back.iter().zip(c) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

/// The refinement loop must apply the table rates as-is: the total applied
/// step length is free to exceed 1 and is never renormalized.
#[test]
fn refinement_never_renormalizes_step_sizes() {
    struct ConstantField;
    impl VelocityField for ConstantField {
        fn chunk_dim(&self) -> usize {
            2
        }
        fn eval(&self, _x: &[f64], _s: &[f64]) -> eqflow::Result<Vec<f64>> {
            Ok(vec![1.0, 0.0])
        }
    }
    let k_max = 30;
    let eta = 0.5;
    let cfg = InferConfig {
        k_max,
        tau_opt: 0.0,
        step_table: StepSizeTable::constant(eta).unwrap(),
        init: InitDist::Gaussian,
    };
    let (chunk, trace) = refine(&ConstantField, &[], &cfg, &mut rng_from_seed(1)).unwrap();
    let init = eqflow::rng::normal_vec(&mut rng_from_seed(1), 2);
    let total = eta * k_max as f64; // 15, far beyond a unit integration budget
    assert_eq!(trace.updates, k_max);
    assert!((chunk[0] - (init[0] - total)).abs() < 1e-12);
    assert!((chunk[1] - init[1]).abs() < 1e-12);
}

/// Default-table refinement on a linear field: per-update contraction factor
/// is exactly |1 - eta_k * slope| step by step.
#[test]
fn refinement_contraction_follows_the_table() {
    struct Linear(f64);
    impl VelocityField for Linear {
        fn chunk_dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64], _s: &[f64]) -> eqflow::Result<Vec<f64>> {
            Ok(vec![self.0 * x[0]])
        }
    }
    let slope = 3.0;
    let cfg = InferConfig {
        k_max: 8,
        tau_opt: 0.0,
        step_table: StepSizeTable::default(),
        init: InitDist::Gaussian,
    };
    let (chunk, trace) = refine(&Linear(slope), &[], &cfg, &mut rng_from_seed(9)).unwrap();
    let init = eqflow::rng::normal_vec(&mut rng_from_seed(9), 1)[0];
    let mut expected = init;
    for k in 1..=8usize {
        let eta = eta_of_step(k, &cfg.step_table).unwrap();
        expected *= 1.0 - eta * slope;
    }
    assert_eq!(trace.updates, 8);
    assert!((chunk[0] - expected).abs() < 1e-12);
}
