//! Anomaly scoring from refinement dynamics, temporal filters, and the
//! detection metrics.
//!
//! The raw score of a planning call is the residual field norm at the last
//! evaluated iterate — it is already computed for convergence checking, so
//! detection costs nothing extra. Converged calls score below the stopping
//! tolerance by construction; calls whose refinement never settles keep a
//! large norm.
//!
//! Two online filters turn a score sequence into a sustained-anomaly flag: a
//! moving average over the last `w` values (prefix mean during warm-up) and a
//! leaky bucket `b ← max(0, (1-λ) b + (r - τ)₊)` that only integrates
//! excursions above its dead zone. AUROC is the tie-corrected Mann–Whitney
//! statistic; the operating point picks the observed-score threshold whose
//! true-positive rate is closest to a target.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::InferenceTrace;
use crate::task::{EpisodeRecord, Monitor, Split};

/// Fixed parameters of the two temporal filters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Moving-average window.
    pub window: usize,
    /// Moving-average trigger threshold.
    pub tau_ma: f64,
    /// Leaky-bucket leak rate λ.
    pub leak: f64,
    /// Leaky-bucket dead-zone threshold τ.
    pub tau_lb: f64,
    /// Leaky-bucket trigger level B.
    pub bucket_trigger: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            window: 5,
            tau_ma: 0.6,
            leak: 0.0,
            tau_lb: 0.5,
            bucket_trigger: 0.7,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("moving-average window must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(Error::config("leak rate must lie in [0, 1]"));
        }
        if self.bucket_trigger.is_nan() || self.bucket_trigger <= 0.0 {
            return Err(Error::config("bucket trigger level must be > 0"));
        }
        Ok(())
    }
}

/// Raw anomaly score of a planning call: the residual norm at the last
/// executed refinement step.
pub fn score_plan(trace: &InferenceTrace) -> Result<f64> {
    trace
        .residuals
        .last()
        .copied()
        .ok_or(Error::EmptyInput("trace residuals"))
}

/// Binary decision: strictly above the threshold.
pub fn is_ood(score: f64, tau_ood: f64) -> bool {
    score > tau_ood
}

/// Streaming moving average with prefix warm-up.
#[derive(Debug, Clone)]
pub struct MovingAverageMonitor {
    window: usize,
    tau: f64,
    buf: VecDeque<f64>,
    flagged: bool,
}

impl MovingAverageMonitor {
    pub fn new(cfg: &FilterConfig) -> Self {
        MovingAverageMonitor {
            window: cfg.window.max(1),
            tau: cfg.tau_ma,
            buf: VecDeque::new(),
            flagged: false,
        }
    }

    /// Current smoothed value after feeding one score.
    pub fn push(&mut self, score: f64) -> f64 {
        self.buf.push_back(score);
        if self.buf.len() > self.window {
            self.buf.pop_front();
        }
        // Summed fresh each push so long streams stay exact.
        self.buf.iter().sum::<f64>() / self.buf.len() as f64
    }
}

impl Monitor for MovingAverageMonitor {
    fn observe(&mut self, score: f64) -> bool {
        let smoothed = self.push(score);
        if !self.flagged && smoothed > self.tau {
            self.flagged = true;
            true
        } else {
            false
        }
    }
}

/// Streaming leaky bucket.
#[derive(Debug, Clone)]
pub struct LeakyBucketMonitor {
    leak: f64,
    tau: f64,
    trigger: f64,
    level: f64,
    flagged: bool,
}

impl LeakyBucketMonitor {
    pub fn new(cfg: &FilterConfig) -> Self {
        LeakyBucketMonitor {
            leak: cfg.leak,
            tau: cfg.tau_lb,
            trigger: cfg.bucket_trigger,
            level: 0.0,
            flagged: false,
        }
    }

    /// Bucket level after feeding one score.
    pub fn push(&mut self, score: f64) -> f64 {
        let excess = (score - self.tau).max(0.0);
        self.level = ((1.0 - self.leak) * self.level + excess).max(0.0);
        self.level
    }
}

impl Monitor for LeakyBucketMonitor {
    fn observe(&mut self, score: f64) -> bool {
        let level = self.push(score);
        if !self.flagged && level >= self.trigger {
            self.flagged = true;
            true
        } else {
            false
        }
    }
}

/// Running moving-average values over a full sequence.
pub fn moving_average_series(scores: &[f64], cfg: &FilterConfig) -> Vec<f64> {
    let mut m = MovingAverageMonitor::new(cfg);
    scores.iter().map(|&r| m.push(r)).collect()
}

/// Running bucket levels over a full sequence.
pub fn leaky_bucket_series(scores: &[f64], cfg: &FilterConfig) -> Vec<f64> {
    let mut b = LeakyBucketMonitor::new(cfg);
    scores.iter().map(|&r| b.push(r)).collect()
}

/// First step (1-based) at which the smoothed sequence exceeds the
/// moving-average threshold, if any.
pub fn moving_average_flag(scores: &[f64], cfg: &FilterConfig) -> (bool, Option<usize>) {
    let mut m = MovingAverageMonitor::new(cfg);
    for (k, &r) in scores.iter().enumerate() {
        if m.observe(r) {
            return (true, Some(k + 1));
        }
    }
    (false, None)
}

/// First step (1-based) at which the bucket level reaches the trigger, if any.
pub fn leaky_bucket_flag(scores: &[f64], cfg: &FilterConfig) -> (bool, Option<usize>) {
    let mut b = LeakyBucketMonitor::new(cfg);
    for (k, &r) in scores.iter().enumerate() {
        if b.observe(r) {
            return (true, Some(k + 1));
        }
    }
    (false, None)
}

/// Tie-corrected Mann–Whitney AUROC:
/// `(#{pos > neg} + 0.5 #{pos = neg}) / (n_pos n_neg)`, computed from ranks.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::EmptyInput("positive scores"));
    }
    if negatives.is_empty() {
        return Err(Error::EmptyInput("negative scores"));
    }
    if positives
        .iter()
        .chain(negatives)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("auroc scores".into()));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Average ranks within tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos = positives.len() as f64;
    let n_neg = negatives.len() as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// A per-planning-call score with its episode-level label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPlan {
    pub score: f64,
    pub label: Split,
    pub episode: usize,
    pub plan_index: usize,
}

/// Threshold chosen by the operating-point sweep, with its rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub tnr: f64,
}

/// Sweeps the distinct observed scores as candidate thresholds (rule:
/// flag when `score >= threshold`) and picks the one whose TPR is closest to
/// `target_tpr`, breaking ties toward higher TNR.
pub fn operating_point(scored: &[ScoredPlan], target_tpr: f64) -> Result<OperatingPoint> {
    let pos: Vec<f64> = scored
        .iter()
        .filter(|p| p.label == Split::Ood)
        .map(|p| p.score)
        .collect();
    let neg: Vec<f64> = scored
        .iter()
        .filter(|p| p.label == Split::Id)
        .map(|p| p.score)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyInput("operating point needs both labels"));
    }
    let mut candidates: Vec<f64> = scored.iter().map(|p| p.score).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best: Option<OperatingPoint> = None;
    for &threshold in &candidates {
        let tpr = pos.iter().filter(|&&v| v >= threshold).count() as f64 / pos.len() as f64;
        let tnr = neg.iter().filter(|&&v| v < threshold).count() as f64 / neg.len() as f64;
        let point = OperatingPoint { threshold, tpr, tnr };
        best = Some(match best {
            None => point,
            Some(b) => {
                let d_new = (tpr - target_tpr).abs();
                let d_old = (b.tpr - target_tpr).abs();
                if d_new < d_old || (d_new == d_old && tnr > b.tnr) {
                    point
                } else {
                    b
                }
            }
        });
    }
    Ok(best.unwrap())
}

/// Mean fraction of interaction time avoided over the given episodes
/// (callers pass the out-of-distribution ones): `1 - t_report / t_total` when
/// flagged, 0 when never flagged.
pub fn time_saved(records: &[EpisodeRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let total: f64 = records
        .iter()
        .map(|r| match r.t_report {
            Some(t) => 1.0 - t as f64 / r.t_total as f64,
            None => 0.0,
        })
        .sum();
    total / records.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::StopReason;

    fn trace(residuals: Vec<f64>) -> InferenceTrace {
        InferenceTrace {
            nfe: residuals.len(),
            residuals,
            updates: 0,
            stop_reason: StopReason::Converged,
            chunk: vec![],
            fault: None,
        }
    }

    #[test]
    fn score_is_last_residual() {
        assert_eq!(score_plan(&trace(vec![2.0, 1.0, 0.05])).unwrap(), 0.05);
        assert_eq!(score_plan(&trace(vec![0.3])).unwrap(), 0.3);
        assert_eq!(score_plan(&trace(vec![2.0, 1.0, 0.5, 0.25])).unwrap(), 0.25);
        assert!(score_plan(&trace(vec![])).is_err());
    }

    #[test]
    fn is_ood_is_strict() {
        assert!(!is_ood(0.0, 0.1));
        assert!(is_ood(0.2, 0.1));
        assert!(!is_ood(0.1, 0.1));
    }

    #[test]
    fn moving_average_prefix_rule() {
        let cfg = FilterConfig::default();
        // All-high: the prefix mean already exceeds the threshold at k = 1.
        let (flag, k) = moving_average_flag(&[1.0, 1.0, 1.0], &cfg);
        assert!(flag);
        assert_eq!(k, Some(1));
        // All-low: never flags.
        let (flag, k) = moving_average_flag(&[0.2; 8], &cfg);
        assert!(!flag);
        assert_eq!(k, None);
    }

    #[test]
    fn moving_average_hand_evaluated_sequence() {
        let cfg = FilterConfig::default();
        // Window 5: mean of [0.2, 0.2, 0.2, 0.2, 2.0] is 0.56, below 0.6.
        let (flag, _) = moving_average_flag(&[0.2, 0.2, 0.2, 0.2, 2.0], &cfg);
        assert!(!flag);
        // One more 2.0: window mean becomes (0.2*3 + 2.0*2)/5 = 0.92.
        let (flag, k) = moving_average_flag(&[0.2, 0.2, 0.2, 0.2, 2.0, 2.0], &cfg);
        assert!(flag);
        assert_eq!(k, Some(6));
        let series = moving_average_series(&[0.2, 0.2, 0.2, 0.2, 2.0, 2.0], &cfg);
        assert!((series[4] - 0.56).abs() < 1e-12);
        assert!((series[5] - 0.92).abs() < 1e-12);
    }

    #[test]
    fn leaky_bucket_hand_evaluated_sequence() {
        let cfg = FilterConfig::default();
        // b = [0.1, 0.5] for residuals [0.6, 0.9]: no flag (B = 0.7).
        let (flag, _) = leaky_bucket_flag(&[0.6, 0.9], &cfg);
        assert!(!flag);
        let series = leaky_bucket_series(&[0.6, 0.9], &cfg);
        assert!((series[0] - 0.1).abs() < 1e-12);
        assert!((series[1] - 0.5).abs() < 1e-12);
        // Appending 0.8: b = 0.8 >= 0.7, flags at k = 3.
        let (flag, k) = leaky_bucket_flag(&[0.6, 0.9, 0.8], &cfg);
        assert!(flag);
        assert_eq!(k, Some(3));
    }

    #[test]
    fn leaky_bucket_dead_zone() {
        let cfg = FilterConfig::default();
        let (flag, _) = leaky_bucket_flag(&[0.5, 0.4, 0.49, 0.0], &cfg);
        assert!(!flag);
        let series = leaky_bucket_series(&[0.5, 0.4, 0.49, 0.0], &cfg);
        assert!(series.iter().all(|&b| b == 0.0));
        // A single excursion of (r - τ) >= B flags immediately when λ = 0.
        let (flag, k) = leaky_bucket_flag(&[1.3], &cfg);
        assert!(flag);
        assert_eq!(k, Some(1));
    }

    #[test]
    fn auroc_basic_cases() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 0.0]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[1.0], &[]).is_err());
    }

    #[test]
    fn auroc_matches_brute_force_pair_counting() {
        let mut rng = crate::rng::rng_from_seed(8);
        use rand::Rng as _;
        for _ in 0..20 {
            let pos: Vec<f64> = (0..17).map(|_| (rng.gen_range(0..8) as f64) / 2.0).collect();
            let neg: Vec<f64> = (0..13).map(|_| (rng.gen_range(0..8) as f64) / 2.0).collect();
            let fast = auroc(&pos, &neg).unwrap();
            let mut wins = 0.0;
            for &p in &pos {
                for &n in &neg {
                    if p > n {
                        wins += 1.0;
                    } else if p == n {
                        wins += 0.5;
                    }
                }
            }
            let brute = wins / (pos.len() * neg.len()) as f64;
            assert!((fast - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_complement_identity() {
        let pos = [0.9, 0.4, 0.4, 1.7];
        let neg = [0.1, 0.4, 0.8];
        let a = auroc(&pos, &neg).unwrap();
        let b = auroc(&neg, &pos).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    fn scored(pos: &[f64], neg: &[f64]) -> Vec<ScoredPlan> {
        let mut v = Vec::new();
        for (i, &s) in pos.iter().enumerate() {
            v.push(ScoredPlan {
                score: s,
                label: Split::Ood,
                episode: i,
                plan_index: 0,
            });
        }
        for (i, &s) in neg.iter().enumerate() {
            v.push(ScoredPlan {
                score: s,
                label: Split::Id,
                episode: i,
                plan_index: 0,
            });
        }
        v
    }

    #[test]
    fn operating_point_perfect_separation() {
        let plans = scored(&[2.0, 3.0, 4.0], &[0.1, 0.2, 0.3]);
        let op = operating_point(&plans, 0.9).unwrap();
        assert_eq!(op.tpr, 1.0);
        assert_eq!(op.tnr, 1.0);
    }

    #[test]
    fn operating_point_degenerate_equal_scores() {
        let plans = scored(&[1.0, 1.0], &[1.0, 1.0]);
        let op = operating_point(&plans, 0.9).unwrap();
        assert_eq!(op.tpr, 1.0);
        assert_eq!(op.tnr, 0.0);
    }

    #[test]
    fn operating_point_matches_brute_force_scan() {
        let mut rng = crate::rng::rng_from_seed(17);
        use rand::Rng as _;
        let pos: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..3.0)).collect();
        let neg: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..2.0)).collect();
        let plans = scored(&pos, &neg);
        let op = operating_point(&plans, 0.9).unwrap();
        // Brute force over the same candidate set.
        let mut best: Option<(f64, f64, f64)> = None;
        let mut cands: Vec<f64> = plans.iter().map(|p| p.score).collect();
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cands.dedup();
        for t in cands {
            let tpr = pos.iter().filter(|&&v| v >= t).count() as f64 / pos.len() as f64;
            let tnr = neg.iter().filter(|&&v| v < t).count() as f64 / neg.len() as f64;
            best = Some(match best {
                None => (t, tpr, tnr),
                Some(b) => {
                    if (tpr - 0.9).abs() < (b.1 - 0.9).abs()
                        || ((tpr - 0.9).abs() == (b.1 - 0.9).abs() && tnr > b.2)
                    {
                        (t, tpr, tnr)
                    } else {
                        b
                    }
                }
            });
        }
        let (bt, btpr, btnr) = best.unwrap();
        assert_eq!(op.threshold, bt);
        assert_eq!(op.tpr, btpr);
        assert_eq!(op.tnr, btnr);
    }

    #[test]
    fn operating_point_requires_both_labels() {
        let plans = scored(&[1.0], &[]);
        assert!(operating_point(&plans, 0.9).is_err());
    }

    #[test]
    fn time_saved_values() {
        use crate::task::EpisodeRecord;
        let ep = |t_report: Option<usize>| EpisodeRecord {
            goal: [0.0, 0.0],
            split: Split::Ood,
            plans: vec![],
            actions: vec![],
            success: false,
            t_report,
            t_total: 300,
            end_step: 0,
            policy_error: None,
        };
        assert_eq!(time_saved(&[ep(Some(150))]), 0.5);
        assert_eq!(time_saved(&[ep(Some(0))]), 1.0);
        assert_eq!(time_saved(&[ep(None)]), 0.0);
        let avg = time_saved(&[ep(Some(150)), ep(None)]);
        assert_eq!(avg, 0.25);
    }
}
