//! Ranking metrics and the setting-partitioned evaluation harness.
//!
//! Metrics are Recall@K and NDCG@K with a single relevant item, so the ideal
//! DCG is 1 and NDCG reduces to `1 / log2(rank + 1)`. Log base 2 makes
//! NDCG@1 coincide with Recall@1. Results are reported for the main setting
//! (all test samples) and separately for the recurring and explorative
//! subsets.

mod markov;

pub use markov::{markov_fit, markov_predict, MarkovModel, MarkovRanker};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, MobilityRecord, Setting};
use crate::model::{forward, hgat_forward, GraphReps, ModelParams};
use crate::hiergraph::HierarchicalGraph;
use crate::tensor::{Matrix, Tape};

/// Anything that can rank candidate next locations for a history.
pub trait LocationRanker {
    /// Top-`k` distinct location ids, best first.
    fn rank_locations(&self, history: &[MobilityRecord], k: usize) -> Vec<usize>;

    /// Identifier used in reports.
    fn model_id(&self) -> String;
}

/// Recall@K and NDCG@K for a single ranked list against one target.
///
/// The ranked list must hold distinct ids and at least `k` of them.
pub fn rank_metrics(ranked: &[usize], target: usize, k: usize) -> (f64, f64) {
    assert!(ranked.len() >= k, "ranking shorter than K = {k}");
    let top = &ranked[..k];
    let mut seen = std::collections::HashSet::with_capacity(k);
    for id in top {
        assert!(seen.insert(id), "duplicate id {id} in ranking");
    }
    match top.iter().position(|&id| id == target) {
        Some(pos) => {
            let rank = pos + 1;
            (1.0, 1.0 / ((rank + 1) as f64).log2())
        }
        None => (0.0, 0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub count: usize,
    /// K -> averaged metrics; `None` when the partition is empty.
    pub metrics: BTreeMap<usize, Option<MetricPair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset_hash: String,
    pub config_hash: String,
    pub settings: BTreeMap<String, SettingReport>,
}

impl EvalReport {
    /// Flat CSV rows, one per (setting, K).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,k,recall,ndcg,count\n");
        for (setting, report) in &self.settings {
            for (k, pair) in &report.metrics {
                match pair {
                    Some(p) => out.push_str(&format!(
                        "{setting},{k},{},{},{}\n",
                        p.recall, p.ndcg, report.count
                    )),
                    None => out.push_str(&format!("{setting},{k},,,0\n")),
                }
            }
        }
        out
    }
}

/// One evaluation case: predict `target` from `history`.
pub struct EvalSample<'a> {
    pub history: &'a [MobilityRecord],
    pub target: usize,
    pub setting: Setting,
}

/// Test trajectories of a dataset as evaluation samples.
pub fn test_samples(dataset: &Dataset) -> Vec<EvalSample<'_>> {
    dataset
        .test
        .iter()
        .zip(&dataset.test_tags)
        .map(|(t, &setting)| EvalSample {
            history: t.history(),
            target: t.target().location,
            setting,
        })
        .collect()
}

fn average(samples: &[(f64, f64)]) -> Option<MetricPair> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len() as f64;
    Some(MetricPair {
        recall: samples.iter().map(|s| s.0).sum::<f64>() / n,
        ndcg: samples.iter().map(|s| s.1).sum::<f64>() / n,
    })
}

/// Evaluate a ranker over pre-tagged samples.
///
/// The main and recurring settings use `ks_main`; the explorative setting,
/// where performance concentrates in deeper ranks, uses `ks_explorative`.
pub fn evaluate(
    ranker: &dyn LocationRanker,
    samples: &[EvalSample<'_>],
    ks_main: &[usize],
    ks_explorative: &[usize],
    dataset_hash: &str,
    config_hash: &str,
) -> EvalReport {
    let max_k = ks_main
        .iter()
        .chain(ks_explorative)
        .copied()
        .max()
        .unwrap_or(1);

    // Metrics per sample per K, bucketed by setting.
    let mut per_k: BTreeMap<usize, Vec<(f64, f64, Setting)>> = BTreeMap::new();
    for sample in samples {
        let ranked = ranker.rank_locations(sample.history, max_k);
        for &k in ks_main.iter().chain(ks_explorative) {
            let (recall, ndcg) = rank_metrics(&ranked, sample.target, k.min(ranked.len()));
            per_k
                .entry(k)
                .or_default()
                .push((recall, ndcg, sample.setting));
        }
    }

    let collect = |filter: &dyn Fn(Setting) -> bool, ks: &[usize]| -> SettingReport {
        let mut metrics = BTreeMap::new();
        let mut count = 0;
        for &k in ks {
            let bucket: Vec<(f64, f64)> = per_k
                .get(&k)
                .map(|rows| {
                    rows.iter()
                        .filter(|(_, _, s)| filter(*s))
                        .map(|(r, n, _)| (*r, *n))
                        .collect()
                })
                .unwrap_or_default();
            count = bucket.len();
            metrics.insert(k, average(&bucket));
        }
        SettingReport { count, metrics }
    };

    let mut settings = BTreeMap::new();
    settings.insert("main".to_string(), collect(&|_| true, ks_main));
    settings.insert(
        "recurring".to_string(),
        collect(&|s| s == Setting::Recurring, ks_main),
    );
    settings.insert(
        "explorative".to_string(),
        collect(&|s| s == Setting::Explorative, ks_explorative),
    );

    EvalReport {
        model: ranker.model_id(),
        dataset_hash: dataset_hash.to_string(),
        config_hash: config_hash.to_string(),
        settings,
    }
}

/// Share of `(history, target)` pairs whose top-ranked location is the
/// target. Used for holdout reporting and overfitting checks.
pub fn recall_at_1(ranker: &dyn LocationRanker, pairs: &[(&[MobilityRecord], usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|(history, target)| ranker.rank_locations(history, 1)[0] == *target)
        .count();
    hits as f64 / pairs.len() as f64
}

/// Model-backed ranker.
///
/// Graph representations depend only on the parameters and the static graph,
/// so they are computed once up front; each call then runs only the temporal
/// module on a throwaway tape.
pub struct ModelRanker<'a> {
    params: &'a ModelParams,
    h_loc: Option<Matrix>,
    h_act: Option<Matrix>,
    id: String,
}

impl<'a> ModelRanker<'a> {
    pub fn new(params: &'a ModelParams, graph: &HierarchicalGraph) -> Self {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (reps, _) = hgat_forward(&bound, graph, false);
        Self {
            params,
            h_loc: reps.h_loc.map(|t| t.value()),
            h_act: reps.h_act.map(|t| t.value()),
            id: format!("model:{}", params.config.content_hash()),
        }
    }

    /// Raw location scores for a history.
    pub fn scores(&self, history: &[MobilityRecord]) -> Vec<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let reps = GraphReps {
            h_loc: self.h_loc.as_ref().map(|m| tape.constant(m.clone())),
            h_act: self.h_act.as_ref().map(|m| tape.constant(m.clone())),
        };
        let logits = forward(&bound, history, &reps);
        logits.location.value().data().to_vec()
    }
}

/// Stable ranking of scores: descending score, ascending id on ties.
pub fn rank_by_score(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

impl LocationRanker for ModelRanker<'_> {
    fn rank_locations(&self, history: &[MobilityRecord], k: usize) -> Vec<usize> {
        rank_by_score(&self.scores(history), k)
    }

    fn model_id(&self) -> String {
        self.id.clone()
    }
}
