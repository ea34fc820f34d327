//! Run configuration: one flat JSON object covering data preparation, graph
//! construction, model dimensions, training, and the ablation switches.
//!
//! Unknown keys are rejected so that a typo in a config file fails loudly
//! instead of silently running with a default.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How the per-item history mass of a confidence label is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MahecMode {
    /// Visit-count share: `f_j = count(j in history) / |history|`.
    Frequency,
    /// Presence indicator: `f_j = [j in history] / |history|`.
    Presence,
}

/// Ablation switches. All off reproduces the full architecture.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    /// Plain one-hot labels instead of history-weighted ones.
    #[serde(default)]
    pub no_mahec: bool,
    /// Drop the activity branch entirely: no activity embeddings, encoder,
    /// decoder, or activity loss.
    #[serde(default)]
    pub no_activity: bool,
    /// Drop the whole hierarchical graph attention module.
    #[serde(default)]
    pub no_hgat: bool,
    /// Keep only the location-layer graph attention.
    #[serde(default)]
    pub no_agat: bool,
    /// Drop the direct residual location decoder.
    #[serde(default)]
    pub no_res: bool,
}

impl VariantFlags {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.no_hgat && self.no_agat {
            return Err(ConfigError::Invalid(
                "no_hgat already removes every graph attention layer; no_agat contradicts it"
                    .into(),
            ));
        }
        if self.no_activity && self.no_agat {
            return Err(ConfigError::Invalid(
                "no_activity already removes the activity-layer attention; no_agat contradicts it"
                    .into(),
            ));
        }
        if self.no_activity && self.no_res {
            return Err(ConfigError::Invalid(
                "no_activity leaves only the residual location decoder; no_res would remove it too"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Data preparation.
    /// Number of intra-day time slots; must divide 24.
    pub hour_slots: usize,
    /// A gap longer than this many hours starts a new trajectory.
    pub gap_hours: f64,
    pub min_trajectory_len: usize,
    /// Users and locations with fewer records are removed iteratively.
    pub min_count: usize,

    // Graph construction.
    /// Distance threshold in kilometers for the location adjacency.
    pub d_h_km: f64,

    // Model dimensions.
    /// Activity and location embedding width.
    pub embed_dim: usize,
    /// User embedding width.
    pub user_dim: usize,
    /// Time embedding width (hour and weekday tables, summed).
    pub time_dim: usize,
    /// Graph representation width.
    pub graph_dim: usize,
    /// LSTM hidden state width.
    pub hidden_dim: usize,
    /// Attention heads per graph attention layer.
    pub attention_heads: usize,

    // Loss and labels.
    pub lambda_l: f64,
    pub lambda_c: f64,
    /// Residual trade-off between the direct and the activity-conditioned
    /// location decoder.
    pub lambda_r: f64,
    /// Confidence assigned to the ground-truth entry of a soft label.
    pub w_c: f64,
    pub mahec_mode: MahecMode,

    // Optimizer.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,

    // Training loop.
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of training trajectories held out for periodic Recall@1
    /// reporting; 0 disables the holdout.
    pub holdout_fraction: f64,
    /// Evaluate the holdout every this many epochs.
    pub eval_every: usize,
    /// Epochs without loss improvement before a warning is logged.
    pub patience: usize,
    /// Stop early once training-set Recall@1 reaches this value.
    pub stop_at_train_recall: Option<f64>,

    pub variant: VariantFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hour_slots: 24,
            gap_hours: 72.0,
            min_trajectory_len: 3,
            min_count: 10,
            d_h_km: 1.0,
            embed_dim: 200,
            user_dim: 10,
            time_dim: 30,
            graph_dim: 50,
            hidden_dim: 600,
            attention_heads: 2,
            lambda_l: 1.0,
            lambda_c: 1.0,
            lambda_r: 0.6,
            w_c: 0.7,
            mahec_mode: MahecMode::Frequency,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            seed: 42,
            holdout_fraction: 0.1,
            eval_every: 1,
            patience: 10,
            stop_at_train_recall: None,
            variant: VariantFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn positive(name: &str, v: usize) -> Result<(), ConfigError> {
            if v == 0 {
                Err(ConfigError::Invalid(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        }
        positive("hour_slots", self.hour_slots)?;
        if 24 % self.hour_slots != 0 {
            return Err(ConfigError::Invalid(format!(
                "hour_slots must divide 24, got {}",
                self.hour_slots
            )));
        }
        positive("min_trajectory_len", self.min_trajectory_len)?;
        positive("min_count", self.min_count)?;
        positive("embed_dim", self.embed_dim)?;
        positive("user_dim", self.user_dim)?;
        positive("time_dim", self.time_dim)?;
        positive("graph_dim", self.graph_dim)?;
        positive("hidden_dim", self.hidden_dim)?;
        positive("attention_heads", self.attention_heads)?;
        positive("epochs", self.epochs)?;
        positive("eval_every", self.eval_every)?;
        if !(self.d_h_km > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "d_h_km must be positive, got {}",
                self.d_h_km
            )));
        }
        if !(self.gap_hours > 0.0) {
            return Err(ConfigError::Invalid("gap_hours must be positive".into()));
        }
        for (name, v) in [("lambda_r", self.lambda_r), ("w_c", self.w_c)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        for (name, v) in [("lambda_l", self.lambda_l), ("lambda_c", self.lambda_c)] {
            if v < 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(ConfigError::Invalid(
                "holdout_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::Invalid("learning_rate must be positive".into()));
        }
        self.variant.validate()
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Apply a `key=value` override onto the JSON form of this config.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(self)?;
        let obj = tree.as_object_mut().expect("config serializes to an object");
        // Variant flags live one level down; allow both `no_res` and
        // `variant.no_res` spellings.
        let (target, field) = match key.strip_prefix("variant.") {
            Some(rest) => (
                obj.get_mut("variant")
                    .and_then(|v| v.as_object_mut())
                    .expect("variant is an object"),
                rest,
            ),
            None if obj.contains_key(key) => (obj, key),
            None => {
                let variant = obj
                    .get_mut("variant")
                    .and_then(|v| v.as_object_mut())
                    .expect("variant is an object");
                if variant.contains_key(key) {
                    (variant, key)
                } else {
                    return Err(ConfigError::Invalid(format!("unknown config key {key:?}")));
                }
            }
        };
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        target.insert(field.to_string(), parsed);
        let config: RunConfig = serde_json::from_value(tree)?;
        config.validate()?;
        Ok(config)
    }

    /// Short content hash used to tie checkpoints and reports to a config.
    pub fn content_hash(&self) -> String {
        crate::dataset::short_hash(self.to_json_pretty().as_bytes())
    }
}
