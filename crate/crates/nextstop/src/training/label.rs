//! History-weighted confidence labels.
//!
//! Instead of a plain one-hot target, the label assigns confidence `w_c` to
//! the ground truth and spreads the remaining `1 - w_c` over the items the
//! user visited in the history, proportional to visit share. The ground
//! truth keeps `w_c` even when it also appears in the history, so the label
//! mass may total less than one in that case; the weights stay nonnegative
//! and the cross-entropy stays well defined. Setting `w_c = 1` reproduces
//! the one-hot label exactly.

use crate::config::MahecMode;

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryLabel {
    /// Length-vocabulary nonnegative weights.
    pub weights: Vec<f64>,
}

impl HistoryLabel {
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Build the label for one prediction.
///
/// `history` holds the item ids of the current trajectory's history portion;
/// it must be nonempty. `mode` picks how the history mass is computed:
/// visit-count share or a bare presence indicator scaled by the history
/// length.
pub fn history_confidence_label(
    history: &[usize],
    target: usize,
    w_c: f64,
    vocab: usize,
    mode: MahecMode,
) -> HistoryLabel {
    assert!(!history.is_empty(), "label needs a nonempty history");
    assert!(target < vocab, "target {target} outside vocabulary {vocab}");
    assert!((0.0..=1.0).contains(&w_c), "w_c must lie in [0, 1]");

    let mut weights = vec![0.0; vocab];
    let len = history.len() as f64;
    match mode {
        MahecMode::Frequency => {
            for &item in history {
                weights[item] += 1.0;
            }
            for w in &mut weights {
                *w = (1.0 - w_c) * (*w / len);
            }
        }
        MahecMode::Presence => {
            for &item in history {
                weights[item] = (1.0 - w_c) / len;
            }
        }
    }
    weights[target] = w_c;
    HistoryLabel { weights }
}

/// Plain one-hot label; identical to `history_confidence_label` at
/// `w_c = 1`.
pub fn one_hot_label(target: usize, vocab: usize) -> HistoryLabel {
    let mut weights = vec![0.0; vocab];
    weights[target] = 1.0;
    HistoryLabel { weights }
}
