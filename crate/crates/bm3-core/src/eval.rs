//! All-ranking top-K evaluation.
//!
//! For every user with at least one target item, all items are scored
//! (dot products of predictor outputs from a dropout-free forward
//! pass), previously-seen items are masked out of the candidate set,
//! and the top `K` of the rest are compared against the targets:
//!
//! * `Recall@K` — fraction of the user's targets that appear in the
//!   top `K`;
//! * `NDCG@K` — DCG with binary gains `1 / log2(rank + 1)` over the
//!   top `K`, normalized by the ideal DCG truncated at
//!   `min(K, #targets)`.
//!
//! Reported numbers are means over evaluated users. Users whose
//! target list is empty are skipped entirely. Ranking breaks score
//! ties by item index, and per-user work is parallelized with a
//! deterministic, index-ordered reduction, so reports are stable
//! across runs and thread counts.

use crate::error::{Error, Result};
use crate::model::{score_all, ForwardState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Valid,
    Test,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Valid => "valid",
            Phase::Test => "test",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Phase::Valid),
            "test" => Ok(Phase::Test),
            other => Err(Error::InvalidParameter {
                name: "phase",
                reason: format!("expected \"valid\" or \"test\", got {:?}", other),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// Ranking cutoffs, e.g. `[10, 20]`.
    pub cutoffs: Vec<usize>,
}

impl EvalConfig {
    pub fn new(cutoffs: Vec<usize>) -> Result<Self> {
        if cutoffs.is_empty() {
            return Err(Error::InvalidParameter {
                name: "cutoffs",
                reason: "at least one ranking cutoff is required".into(),
            });
        }
        if cutoffs.iter().any(|&k| k == 0) {
            return Err(Error::InvalidParameter {
                name: "cutoffs",
                reason: "cutoffs must be at least 1".into(),
            });
        }
        Ok(EvalConfig { cutoffs })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub phase: Phase,
    /// Mean Recall@K, keyed by cutoff.
    pub recall: BTreeMap<usize, f64>,
    /// Mean NDCG@K, keyed by cutoff.
    pub ndcg: BTreeMap<usize, f64>,
    /// Number of users that had targets and were evaluated.
    pub users: usize,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }
}

/// Indices of the top `k` non-excluded items by score, descending,
/// with ties broken by ascending item index.
pub fn rank_items(scores: &[f64], excluded: &[bool], k: usize) -> Vec<u32> {
    debug_assert_eq!(scores.len(), excluded.len());
    let cmp = |a: &(u32, f64), b: &(u32, f64)| {
        b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
    };
    let mut cand: Vec<(u32, f64)> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| !excluded[i])
        .map(|(i, &s)| (i as u32, s))
        .collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.into_iter().map(|(i, _)| i).collect()
}

/// Fraction of `targets` that appear within the first `k` ranked
/// items. Zero when `targets` is empty.
pub fn recall_at_k(ranked: &[u32], targets: &HashSet<u32>, k: usize) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let top = &ranked[..k.min(ranked.len())];
    let hits = top.iter().filter(|i| targets.contains(i)).count();
    hits as f64 / targets.len() as f64
}

/// Binary-gain NDCG over the first `k` ranked items; the ideal DCG is
/// truncated at `min(k, #targets)`. Zero when `targets` is empty.
pub fn ndcg_at_k(ranked: &[u32], targets: &HashSet<u32>, k: usize) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let gain = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let top = &ranked[..k.min(ranked.len())];
    let dcg: f64 = top
        .iter()
        .enumerate()
        .filter(|(_, i)| targets.contains(i))
        .map(|(pos, _)| gain(pos))
        .sum();
    let ideal: f64 = (0..k.min(targets.len())).map(gain).sum();
    dcg / ideal
}

/// Evaluates a dropout-free forward state against per-user target
/// lists, masking each user's `exclude` items out of the candidates.
pub fn evaluate(
    phase: Phase,
    state: &ForwardState,
    targets: &[Vec<u32>],
    exclude: &[Vec<u32>],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let (nu, ni) = (state.num_users(), state.num_items());
    if targets.len() != nu || exclude.len() != nu {
        return Err(Error::DimensionMismatch {
            op: "evaluate",
            detail: format!(
                "{} users in the state, {} target lists, {} exclusion lists",
                nu,
                targets.len(),
                exclude.len()
            ),
        });
    }
    for (u, list) in targets.iter().chain(exclude.iter()).enumerate() {
        for &i in list {
            if (i as usize) >= ni {
                return Err(Error::EdgeOutOfRange {
                    user: (u % nu) as u32,
                    item: i,
                    num_users: nu,
                    num_items: ni,
                });
            }
        }
    }
    let _ = EvalConfig::new(cfg.cutoffs.clone())?;
    let k_max = *cfg.cutoffs.iter().max().expect("nonempty");

    // Index-ordered parallel map, sequential reduction: deterministic
    // regardless of thread count.
    let per_user: Vec<Option<Vec<(f64, f64)>>> = (0..nu)
        .into_par_iter()
        .map(|u| {
            if targets[u].is_empty() {
                return None;
            }
            let scores = score_all(state, u).expect("user index in range");
            let mut excluded = vec![false; ni];
            for &i in &exclude[u] {
                excluded[i as usize] = true;
            }
            let ranked = rank_items(&scores, &excluded, k_max);
            let tset: HashSet<u32> = targets[u].iter().copied().collect();
            Some(
                cfg.cutoffs
                    .iter()
                    .map(|&k| (recall_at_k(&ranked, &tset, k), ndcg_at_k(&ranked, &tset, k)))
                    .collect(),
            )
        })
        .collect();

    let mut users = 0usize;
    let mut sums = vec![(0.0f64, 0.0f64); cfg.cutoffs.len()];
    for row in per_user.into_iter().flatten() {
        users += 1;
        for (acc, v) in sums.iter_mut().zip(row) {
            acc.0 += v.0;
            acc.1 += v.1;
        }
    }
    let denom = if users == 0 { 1.0 } else { users as f64 };
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for (&k, &(r, n)) in cfg.cutoffs.iter().zip(&sums) {
        recall.insert(k, r / denom);
        ndcg.insert(k, n / denom);
    }
    Ok(MetricsReport { phase, recall, ndcg, users })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_adjacency;
    use crate::mat::Mat;
    use crate::model::{self, ModelParams};
    use crate::nn::{LinearLayer, MaskMode, ParamTensor};
    use crate::rng;
    use rand::Rng;

    fn set(items: &[u32]) -> HashSet<u32> {
        items.iter().copied().collect()
    }

    #[test]
    fn ranking_orders_by_score_then_index() {
        let scores = [0.1, 0.9, 0.5, 0.9];
        let none = [false; 4];
        assert_eq!(rank_items(&scores, &none, 3), vec![1, 3, 2]);
        assert_eq!(rank_items(&scores, &none, 10), vec![1, 3, 2, 0]);
        let excl = [false, true, false, false];
        assert_eq!(rank_items(&scores, &excl, 2), vec![3, 2]);
        assert_eq!(rank_items(&scores, &[true; 4], 2), Vec::<u32>::new());
    }

    #[test]
    fn recall_hand_example() {
        // Two targets, one hit in the top 2.
        let ranked = vec![7, 3, 1];
        assert_eq!(recall_at_k(&ranked, &set(&[3, 9]), 2), 0.5);
        assert_eq!(recall_at_k(&ranked, &set(&[3, 9]), 1), 0.0);
        assert_eq!(recall_at_k(&ranked, &set(&[7, 3]), 2), 1.0);
    }

    #[test]
    fn ndcg_hand_example() {
        // Targets {a, b}; ranked = [x, a]: DCG = 1/log2(3) = 0.63093,
        // IDCG@2 = 1 + 1/log2(3) = 1.63093, NDCG = 0.38685.
        let ranked = vec![5, 1];
        let t = set(&[1, 2]);
        let got = ndcg_at_k(&ranked, &t, 2);
        assert!((got - 0.38685).abs() < 1e-5, "got {}", got);
        // Perfect single-target ranking is exactly 1.
        assert_eq!(ndcg_at_k(&[4], &set(&[4]), 1), 1.0);
        // Ideal truncates at the target count: one target found at
        // rank 1 is perfect even for large K.
        assert_eq!(ndcg_at_k(&[4, 9, 8], &set(&[4]), 3), 1.0);
    }

    #[test]
    fn metrics_match_full_sort_oracle_on_random_instances() {
        let mut r = rng::stream(2024, "eval-oracle", &[]);
        for _ in 0..120 {
            let ni = r.random_range(1..=50usize);
            let scores: Vec<f64> = (0..ni).map(|_| r.random_range(-1.0..=1.0)).collect();
            let excluded: Vec<bool> = (0..ni).map(|_| r.random_range(0.0..1.0) < 0.2).collect();
            let targets: HashSet<u32> = (0..ni as u32)
                .filter(|&i| !excluded[i as usize] && r.random_range(0.0..1.0) < 0.3)
                .collect();
            if targets.is_empty() {
                continue;
            }
            let k = r.random_range(1..=20usize);

            // Oracle: full sort of the candidate list.
            let mut full: Vec<(u32, f64)> = scores
                .iter()
                .enumerate()
                .filter(|&(i, _)| !excluded[i])
                .map(|(i, &s)| (i as u32, s))
                .collect();
            full.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let oracle_top: Vec<u32> = full.iter().take(k).map(|&(i, _)| i).collect();
            let hits = oracle_top.iter().filter(|i| targets.contains(i)).count();
            let oracle_recall = hits as f64 / targets.len() as f64;
            let dcg: f64 = oracle_top
                .iter()
                .enumerate()
                .filter(|(_, i)| targets.contains(i))
                .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
                .sum();
            let idcg: f64 =
                (0..k.min(targets.len())).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();

            let ranked = rank_items(&scores, &excluded, k);
            assert_eq!(ranked, oracle_top);
            assert!((recall_at_k(&ranked, &targets, k) - oracle_recall).abs() < 1e-12);
            assert!((ndcg_at_k(&ranked, &targets, k) - dcg / idcg).abs() < 1e-12);
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut r = rng::stream(7, "monotone", &[]);
        let scores: Vec<f64> = (0..40).map(|_| r.random_range(-1.0..=1.0)).collect();
        let excluded = vec![false; 40];
        let targets: HashSet<u32> = (0..40u32).filter(|_| r.random_range(0.0..1.0) < 0.25).collect();
        let ranked = rank_items(&scores, &excluded, 40);
        let mut prev = 0.0;
        for k in 1..=40 {
            let cur = recall_at_k(&ranked, &targets, k);
            assert!(cur >= prev - 1e-15);
            prev = cur;
        }
    }

    /// d = 1 model whose scores are user_value * item_value, with no
    /// propagation (zero layers) so readouts are just embeddings.
    fn scoring_state(user_val: f64, item_vals: &[f64]) -> ForwardState {
        let items = Mat::from_vec(item_vals.len(), 1, item_vals.to_vec()).unwrap();
        let params = ModelParams {
            num_users: 1,
            num_items: item_vals.len(),
            d: 1,
            layers: 0,
            user_emb: ParamTensor::new("user_emb", Mat::from_rows(&[&[user_val]]).unwrap()),
            item_emb: ParamTensor::new("item_emb", items),
            projections: Vec::new(),
            predictor: LinearLayer::from_parts(
                "pred",
                Mat::from_rows(&[&[1.0]]).unwrap(),
                Mat::zeros(1, 1),
            ),
        };
        let adj = build_adjacency(1, item_vals.len(), &[]).unwrap();
        model::forward(&params, &adj, &[], 0.0, MaskMode::Element, 0).unwrap()
    }

    #[test]
    fn evaluate_masks_seen_items_and_averages_users() {
        // Items score [6, 2, 4] for the single user (values doubled by
        // the item readout residual, which keeps the order).
        let state = scoring_state(1.0, &[3.0, 1.0, 2.0]);
        let cfg = EvalConfig::new(vec![1, 2]).unwrap();
        // Best item 0 is excluded; target is item 2, ranked first.
        let report =
            evaluate(Phase::Valid, &state, &[vec![2]], &[vec![0]], &cfg).unwrap();
        assert_eq!(report.users, 1);
        assert_eq!(report.recall_at(1), Some(1.0));
        assert_eq!(report.ndcg[&1], 1.0);
        // Without the exclusion the target sits at rank 2.
        let report2 =
            evaluate(Phase::Valid, &state, &[vec![2]], &[vec![]], &cfg).unwrap();
        assert_eq!(report2.recall_at(1), Some(0.0));
        assert_eq!(report2.recall_at(2), Some(1.0));
    }

    #[test]
    fn evaluate_skips_users_without_targets() {
        let state = {
            let params = ModelParams::init(3, 5, 4, 1, &[], 99).unwrap();
            let adj = build_adjacency(3, 5, &[(0, 0), (1, 1), (2, 2)]).unwrap();
            model::forward(&params, &adj, &[], 0.0, MaskMode::Element, 0).unwrap()
        };
        let cfg = EvalConfig::new(vec![2]).unwrap();
        let targets = vec![vec![1], vec![], vec![3]];
        let exclude = vec![vec![0], vec![1], vec![2]];
        let report = evaluate(Phase::Test, &state, &targets, &exclude, &cfg).unwrap();
        assert_eq!(report.users, 2);
        // All empty: zero users, zero metrics, no NaN.
        let empty = evaluate(Phase::Test, &state, &[vec![], vec![], vec![]], &exclude, &cfg)
            .unwrap();
        assert_eq!(empty.users, 0);
        assert_eq!(empty.recall[&2], 0.0);
    }

    #[test]
    fn evaluate_is_deterministic_across_runs() {
        let params = ModelParams::init(40, 60, 8, 2, &[], 5).unwrap();
        let edges: Vec<(u32, u32)> = (0..40u32)
            .flat_map(|u| (0..3u32).map(move |j| (u, (u * 7 + j * 11) % 60)))
            .collect();
        let adj = build_adjacency(40, 60, &edges).unwrap();
        let state = model::forward(&params, &adj, &[], 0.0, MaskMode::Element, 0).unwrap();
        let targets: Vec<Vec<u32>> = (0..40u32).map(|u| vec![u % 60, (u + 13) % 60]).collect();
        let exclude: Vec<Vec<u32>> = (0..40u32).map(|u| vec![(u * 7) % 60]).collect();
        let cfg = EvalConfig::new(vec![5, 10, 20]).unwrap();
        let a = evaluate(Phase::Valid, &state, &targets, &exclude, &cfg).unwrap();
        let b = evaluate(Phase::Valid, &state, &targets, &exclude, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn evaluate_validates_shapes_and_indices() {
        let state = scoring_state(1.0, &[1.0, 2.0]);
        let cfg = EvalConfig::new(vec![1]).unwrap();
        assert!(evaluate(Phase::Valid, &state, &[], &[], &cfg).is_err());
        assert!(
            evaluate(Phase::Valid, &state, &[vec![5]], &[vec![]], &cfg).is_err(),
            "target index out of range"
        );
        assert!(EvalConfig::new(vec![]).is_err());
        assert!(EvalConfig::new(vec![0]).is_err());
    }
}
