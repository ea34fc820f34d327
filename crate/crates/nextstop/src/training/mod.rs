//! Loss construction and the training loop.
//!
//! Training is sample-at-a-time: for each trajectory the hierarchical
//! attention pass runs once, both encoders consume the history, the soft
//! labels are built from that history, and one Adam step follows the
//! backward pass. Trajectory order is reshuffled with a seeded generator
//! every epoch.

mod adam;
mod label;

pub use adam::AdamState;
pub use label::{history_confidence_label, one_hot_label, HistoryLabel};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::{Dataset, Trajectory};
use crate::eval::{recall_at_1, ModelRanker};
use crate::hiergraph::HierarchicalGraph;
use crate::model::{forward, hgat_forward, ModelParams, Sizes};
use crate::tensor::{Matrix, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("non-finite value in {what}; aborting")]
    NonFinite { what: String },
}

/// Soft-label cross-entropy: `-sum_i w_i log softmax(logits)_i` for a
/// column vector of logits. Stabilized through log-sum-exp; weights are
/// attached as constants and receive no gradient.
pub fn soft_cross_entropy(logits: &Tensor, weights: &[f64]) -> Tensor {
    let (rows, cols) = logits.shape();
    assert_eq!(cols, 1, "logits must be a column vector, got {rows}x{cols}");
    assert_eq!(weights.len(), rows, "label length {} vs {rows} logits", weights.len());
    debug_assert!(weights.iter().all(|w| *w >= 0.0));
    let tape = logits.tape();
    let log_probs = logits.transpose().log_softmax_rows();
    let w = tape.constant(Matrix::from_vec(1, weights.len(), weights.to_vec()));
    w.hadamard(&log_probs).sum().scale(-1.0)
}

/// Weighted joint objective over the location and activity heads.
pub fn total_loss(
    loss_location: &Tensor,
    loss_activity: Option<&Tensor>,
    lambda_l: f64,
    lambda_c: f64,
) -> Tensor {
    let weighted = loss_location.scale(lambda_l);
    match loss_activity {
        Some(loss_c) => weighted.add(&loss_c.scale(lambda_c)),
        None => weighted,
    }
}

/// Per-sample loss values, for logging.
pub struct SampleLoss {
    pub total: Tensor,
    pub location: f64,
    pub activity: Option<f64>,
}

/// Build the full loss for one trajectory on an already-bound tape.
pub fn trajectory_loss(
    bound: &crate::model::BoundParams,
    graph: &HierarchicalGraph,
    trajectory: &Trajectory,
    sizes: &Sizes,
    config: &RunConfig,
) -> SampleLoss {
    let (reps, _) = hgat_forward(bound, graph, false);
    let history = trajectory.history();
    let logits = forward(bound, history, &reps);
    let target = trajectory.target();

    let location_label = if config.variant.no_mahec {
        one_hot_label(target.location, sizes.locations)
    } else {
        let visited: Vec<usize> = history.iter().map(|r| r.location).collect();
        history_confidence_label(
            &visited,
            target.location,
            config.w_c,
            sizes.locations,
            config.mahec_mode,
        )
    };
    let loss_location = soft_cross_entropy(&logits.location, &location_label.weights);

    let loss_activity = logits.activity.as_ref().map(|activity_logits| {
        let label = if config.variant.no_mahec {
            one_hot_label(target.activity, sizes.activities)
        } else {
            let done: Vec<usize> = history.iter().map(|r| r.activity).collect();
            history_confidence_label(
                &done,
                target.activity,
                config.w_c,
                sizes.activities,
                config.mahec_mode,
            )
        };
        soft_cross_entropy(activity_logits, &label.weights)
    });

    let total = total_loss(
        &loss_location,
        loss_activity.as_ref(),
        config.lambda_l,
        config.lambda_c,
    );
    SampleLoss {
        location: loss_location.scalar(),
        activity: loss_activity.as_ref().map(|t| t.scalar()),
        total,
    }
}

/// Mean per-sample losses of a frozen model over a trajectory slice.
pub fn mean_loss(
    params: &ModelParams,
    graph: &HierarchicalGraph,
    trajectories: &[Trajectory],
    config: &RunConfig,
) -> (f64, f64, Option<f64>) {
    let sizes = params.sizes;
    let mut total = 0.0;
    let mut location = 0.0;
    let mut activity = 0.0;
    let mut has_activity = false;
    for t in trajectories {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = trajectory_loss(&bound, graph, t, &sizes, config);
        total += loss.total.scalar();
        location += loss.location;
        if let Some(a) = loss.activity {
            activity += a;
            has_activity = true;
        }
    }
    let n = trajectories.len().max(1) as f64;
    (
        total / n,
        location / n,
        has_activity.then_some(activity / n),
    )
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_l: f64,
    pub loss_c: Option<f64>,
    pub loss_total: f64,
    pub recall1_holdout: Option<f64>,
    pub wallclock_s: f64,
}

pub struct TrainOutcome {
    /// Best parameters by holdout Recall@1, or the final ones when no
    /// holdout was evaluated.
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Epoch the returned parameters came from (1-based).
    pub best_epoch: usize,
}

/// Train a fresh model on the dataset's training split.
pub fn train(
    dataset: &Dataset,
    graph: &HierarchicalGraph,
    config: &RunConfig,
) -> Result<TrainOutcome, TrainError> {
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let sizes = Sizes::of(dataset);
    let mut params = ModelParams::new(config, sizes, config.seed);
    let mut optimizer = AdamState::new(
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    );

    // Deterministic holdout slice for periodic Recall@1 reporting.
    let mut indices: Vec<usize> = (0..dataset.train.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    indices.shuffle(&mut split_rng);
    let holdout_len = ((dataset.train.len() as f64) * config.holdout_fraction).round() as usize;
    let holdout_len = holdout_len.min(dataset.train.len().saturating_sub(1));
    let (holdout_idx, train_idx) = indices.split_at(holdout_len);
    let train_idx: Vec<usize> = train_idx.to_vec();
    let holdout: Vec<&Trajectory> = holdout_idx.iter().map(|&i| &dataset.train[i]).collect();

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut best_loss = f64::INFINITY;
    let mut epochs_since_improvement = 0usize;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order = train_idx.clone();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut sum_total = 0.0;
        let mut sum_location = 0.0;
        let mut sum_activity = 0.0;
        let mut saw_activity = false;
        for &idx in &order {
            let trajectory = &dataset.train[idx];
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let loss = trajectory_loss(&bound, graph, trajectory, &sizes, config);
            let total_value = loss.total.scalar();
            if !total_value.is_finite() {
                return Err(TrainError::NonFinite {
                    what: format!("loss at epoch {epoch}"),
                });
            }
            sum_total += total_value;
            sum_location += loss.location;
            if let Some(a) = loss.activity {
                sum_activity += a;
                saw_activity = true;
            }

            tape.backward(&loss.total);
            let grads: BTreeMap<String, Matrix> = bound
                .registry
                .iter()
                .filter_map(|(name, tensor)| tensor.grad().map(|g| (name.clone(), g)))
                .collect();
            optimizer.apply(&mut params, &grads)?;
        }

        let n = order.len().max(1) as f64;
        let mean_total = sum_total / n;

        let recall1_holdout = if !holdout.is_empty() && epoch % config.eval_every == 0 {
            let ranker = ModelRanker::new(&params, graph);
            let pairs: Vec<(&[crate::dataset::MobilityRecord], usize)> = holdout
                .iter()
                .map(|t| (t.history(), t.target().location))
                .collect();
            let recall = recall_at_1(&ranker, &pairs);
            match &best {
                Some((best_recall, _, _)) if *best_recall >= recall => {}
                _ => best = Some((recall, epoch, params.clone())),
            }
            Some(recall)
        } else {
            None
        };

        if mean_total < best_loss {
            best_loss = mean_total;
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement == config.patience {
                log::warn!(
                    "loss has not improved for {} epochs (epoch {epoch}, mean {mean_total:.6})",
                    config.patience
                );
            }
        }

        log.push(EpochLog {
            epoch,
            loss_l: sum_location / n,
            loss_c: saw_activity.then_some(sum_activity / n),
            loss_total: mean_total,
            recall1_holdout,
            wallclock_s: started.elapsed().as_secs_f64(),
        });

        if let Some(threshold) = config.stop_at_train_recall {
            if epoch % config.eval_every == 0 {
                let ranker = ModelRanker::new(&params, graph);
                let pairs: Vec<(&[crate::dataset::MobilityRecord], usize)> = train_idx
                    .iter()
                    .map(|&i| {
                        let t = &dataset.train[i];
                        (t.history(), t.target().location)
                    })
                    .collect();
                if recall_at_1(&ranker, &pairs) >= threshold {
                    break;
                }
            }
        }
    }

    let final_epoch = log.last().map(|l| l.epoch).unwrap_or(0);
    let (params, best_epoch) = match best {
        // Prefer the holdout winner, but fall back to the final parameters
        // when training never reached an evaluation point.
        Some((_, epoch, best_params)) => (best_params, epoch),
        None => (params, final_epoch),
    };
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
    })
}

/// Write the epoch log as JSONL.
pub fn write_log(log: &[EpochLog], path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut w, entry)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_err;
    use approx::assert_relative_eq;

    #[test]
    fn one_hot_uniform_logits_is_ln_n() {
        let tape = Tape::new();
        let logits = tape.constant(Matrix::zeros(5, 1));
        let loss = soft_cross_entropy(&logits, &one_hot_label(2, 5).weights);
        assert_relative_eq!(loss.scalar(), (5.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_logits_beat_uniform() {
        let tape = Tape::new();
        let mut values = vec![0.0; 5];
        values[2] = 3.0;
        let logits = tape.constant(Matrix::col_from(&values));
        let loss = soft_cross_entropy(&logits, &one_hot_label(2, 5).weights);
        assert!(loss.scalar() < (5.0f64).ln());
    }

    #[test]
    fn weighted_label_hand_value() {
        // Weights [0.7, 0.3] with equal logits: loss = -(0.7 + 0.3) ln 0.5.
        let tape = Tape::new();
        let logits = tape.constant(Matrix::col_from(&[0.0, 0.0]));
        let loss = soft_cross_entropy(&logits, &[0.7, 0.3]);
        assert_relative_eq!(loss.scalar(), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn loss_is_shift_invariant() {
        let tape = Tape::new();
        let logits = tape.constant(Matrix::col_from(&[0.3, -1.2, 2.0]));
        let shifted = logits.add(&tape.constant(Matrix::from_vec(3, 1, vec![123.456; 3])));
        let w = [0.5, 0.2, 0.3];
        let a = soft_cross_entropy(&logits, &w).scalar();
        let b = soft_cross_entropy(&shifted, &w).scalar();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn mahec_at_full_confidence_equals_one_hot_bitwise() {
        let tape = Tape::new();
        let logits = tape.constant(Matrix::col_from(&[0.4, -0.9, 1.3, 0.0]));
        let soft = history_confidence_label(&[0, 3, 3], 2, 1.0, 4, crate::config::MahecMode::Frequency);
        let hard = one_hot_label(2, 4);
        let a = soft_cross_entropy(&logits, &soft.weights).scalar();
        let b = soft_cross_entropy(&logits, &hard.weights).scalar();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn total_loss_combines_linearly() {
        let tape = Tape::new();
        let l = tape.constant(Matrix::from_vec(1, 1, vec![2.0]));
        let c = tape.constant(Matrix::from_vec(1, 1, vec![3.0]));
        assert_eq!(total_loss(&l, Some(&c), 1.0, 1.0).scalar(), 5.0);
        assert_eq!(total_loss(&l, Some(&c), 1.0, 0.0).scalar(), 2.0);
        assert_eq!(total_loss(&l, None, 2.0, 1.0).scalar(), 4.0);
    }

    #[test]
    fn total_loss_gradient_is_sum_of_component_gradients() {
        // Linearity of the tape: d(total)/dw = lambda_l d(l)/dw + lambda_c d(c)/dw.
        let run = |lambda_l: f64, lambda_c: f64| -> (f64, f64) {
            let tape = Tape::new();
            let w = tape.leaf(Matrix::col_from(&[0.7, -0.3]), true);
            let loss_l = w.hadamard(&w).sum();
            let loss_c = w.sum();
            let total = total_loss(&loss_l, Some(&loss_c), lambda_l, lambda_c);
            tape.backward(&total);
            let g = w.grad().unwrap();
            (g.data()[0], g.data()[1])
        };
        let (gl0, gl1) = run(1.0, 0.0);
        let (gc0, gc1) = run(0.0, 1.0);
        let (gt0, gt1) = run(1.5, 2.5);
        assert!(rel_err(gt0, 1.5 * gl0 + 2.5 * gc0, 1e-12) < 1e-12);
        assert!(rel_err(gt1, 1.5 * gl1 + 2.5 * gc1, 1e-12) < 1e-12);
    }

    #[test]
    fn empty_train_set_is_fatal() {
        let dataset = Dataset {
            train: vec![],
            test: vec![],
            test_tags: vec![],
            affiliation: vec![0],
            gps: vec![(0.0, 0.0)],
            n_users: 1,
            n_activities: 1,
            n_locations: 1,
            hour_slots: 24,
            user_keys: vec!["u".into()],
            venue_keys: vec!["v".into()],
            category_keys: vec!["c".into()],
            category_names: vec![String::new()],
        };
        let graph = crate::hiergraph::build_graph(&dataset.gps, &dataset.affiliation, &[], 1, 1.0)
            .unwrap();
        assert!(matches!(
            train(&dataset, &graph, &RunConfig::default()),
            Err(TrainError::EmptyTrainSet)
        ));
    }
}
