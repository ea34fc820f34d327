//! First-order Markov-chain baseline.
//!
//! Transition counts come from consecutive record pairs inside each training
//! trajectory; the popularity vector counts every training visit. Prediction
//! ranks the successors of the last visited location by transition count,
//! breaking ties by global popularity and then by id, and fills any
//! remaining slots from global popularity. An unseen last location falls
//! back to pure popularity ranking.

use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::{MobilityRecord, Trajectory};

use super::LocationRanker;

#[derive(Debug, Clone)]
pub struct MarkovModel {
    /// Per location: successor -> transition count.
    transitions: Vec<BTreeMap<usize, u64>>,
    /// Per location: training visit count.
    popularity: Vec<u64>,
    /// Per user: set of locations visited in training.
    user_visited: Vec<BTreeSet<usize>>,
}

pub fn markov_fit(train: &[Trajectory], n_locations: usize, n_users: usize) -> MarkovModel {
    let mut transitions = vec![BTreeMap::new(); n_locations];
    let mut popularity = vec![0u64; n_locations];
    let mut user_visited = vec![BTreeSet::new(); n_users];
    for t in train {
        for pair in t.records.windows(2) {
            *transitions[pair[0].location]
                .entry(pair[1].location)
                .or_insert(0) += 1;
        }
        for r in &t.records {
            popularity[r.location] += 1;
            user_visited[t.user].insert(r.location);
        }
    }
    MarkovModel {
        transitions,
        popularity,
        user_visited,
    }
}

impl MarkovModel {
    pub fn popularity(&self) -> &[u64] {
        &self.popularity
    }

    /// Ranking restricted to an optional candidate set. Without candidates
    /// the remaining slots are filled from global popularity.
    fn rank(&self, last: usize, k: usize, candidates: Option<&BTreeSet<usize>>) -> Vec<usize> {
        let admitted = |l: usize| candidates.map_or(true, |c| c.contains(&l));
        let mut out: Vec<usize> = Vec::with_capacity(k);

        let mut successors: Vec<(usize, u64)> = self.transitions[last]
            .iter()
            .filter(|(l, _)| admitted(**l))
            .map(|(&l, &c)| (l, c))
            .collect();
        successors.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(self.popularity[b.0].cmp(&self.popularity[a.0]))
                .then(a.0.cmp(&b.0))
        });
        out.extend(successors.into_iter().map(|(l, _)| l).take(k));

        if out.len() < k {
            let chosen: BTreeSet<usize> = out.iter().copied().collect();
            let mut rest: Vec<usize> = (0..self.popularity.len())
                .filter(|l| admitted(*l) && !chosen.contains(l))
                .collect();
            rest.sort_by(|&a, &b| {
                self.popularity[b]
                    .cmp(&self.popularity[a])
                    .then(a.cmp(&b))
            });
            out.extend(rest.into_iter().take(k - out.len()));
        }
        out
    }
}

/// Global prediction with the popularity fallback.
pub fn markov_predict(model: &MarkovModel, last: usize, k: usize) -> Vec<usize> {
    model.rank(last, k, None)
}

/// Ranker wrapper for the evaluation harness.
pub struct MarkovRanker {
    pub model: MarkovModel,
    /// When set, candidates are limited to the user's own training history,
    /// which pins explorative recall to exactly zero.
    pub restrict_to_user_history: bool,
}

impl LocationRanker for MarkovRanker {
    fn rank_locations(&self, history: &[MobilityRecord], k: usize) -> Vec<usize> {
        let last = history.last().expect("empty history").location;
        if self.restrict_to_user_history {
            let user = history[0].user;
            let candidates = &self.model.user_visited[user];
            let mut ranked = self.model.rank(last, k, Some(candidates));
            // Pad with never-ranked ids so the list length still reaches k;
            // these slots can never hold a user-visited location.
            if ranked.len() < k {
                let chosen: BTreeSet<usize> = ranked.iter().copied().collect();
                ranked.extend(
                    (0..self.model.popularity.len())
                        .filter(|l| !chosen.contains(l) && !candidates.contains(l))
                        .take(k - ranked.len()),
                );
            }
            ranked
        } else {
            self.model.rank(last, k, None)
        }
    }

    fn model_id(&self) -> String {
        if self.restrict_to_user_history {
            "markov:restricted".into()
        } else {
            "markov".into()
        }
    }
}
