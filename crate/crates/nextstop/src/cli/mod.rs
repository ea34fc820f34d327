//! Command implementations behind the `nextstop` binary.
//!
//! Every command is a plain function over paths and a [`RunConfig`], so the
//! whole pipeline is scriptable from tests and examples without spawning
//! processes. Artifact compatibility is enforced through content hashes:
//! graph bundles remember their dataset, checkpoints remember both, and a
//! mismatch is fatal before any compute starts.

mod synth;

pub use synth::{synth_generate, SynthError, SynthMeta, SynthSpec};

use std::fmt;
use std::path::Path;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    parse_checkins, prepare, read_bundle, write_bundle, Dataset, DatasetError, PrepareParams,
    RawFormat, Setting,
};
use crate::eval::{evaluate, markov_fit, EvalReport, MarkovRanker, ModelRanker};
use crate::hiergraph::{
    build_graph, read_graph_bundle, write_dense_csv, write_graph_bundle, GraphError,
    HierarchicalGraph,
};
use crate::model::{ModelError, ModelParams};
use crate::training::{train, write_log, TrainError};

/// Error with the process exit code it maps to: 2 for usage and input
/// problems, 1 for internal failures.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(inner) => CliError::Internal(inner.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Io(inner) => CliError::Internal(inner.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Invalid(msg) => CliError::Usage(msg),
            infeasible => CliError::Input(infeasible.to_string()),
        }
    }
}

fn internal_io(e: std::io::Error) -> CliError {
    CliError::Internal(e.to_string())
}

/// Corpus statistics printed after preparation, in the shape of the usual
/// dataset summary tables.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PrepareStats {
    pub users: usize,
    pub activities: usize,
    pub locations: usize,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub records: usize,
    pub skipped_rows: usize,
    pub recurring: usize,
    pub explorative: usize,
}

impl PrepareStats {
    fn of(dataset: &Dataset, skipped_rows: usize) -> Self {
        let records = dataset
            .train
            .iter()
            .chain(&dataset.test)
            .map(|t| t.records.len())
            .sum();
        let recurring = dataset
            .test_tags
            .iter()
            .filter(|&&t| t == Setting::Recurring)
            .count();
        Self {
            users: dataset.n_users,
            activities: dataset.n_activities,
            locations: dataset.n_locations,
            train_trajectories: dataset.train.len(),
            test_trajectories: dataset.test.len(),
            records,
            skipped_rows,
            recurring,
            explorative: dataset.test_tags.len() - recurring,
        }
    }

    pub fn recurring_share(&self) -> Option<f64> {
        let total = self.recurring + self.explorative;
        (total > 0).then(|| self.recurring as f64 / total as f64)
    }
}

impl fmt::Display for PrepareStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users:        {}", self.users)?;
        writeln!(f, "activities:   {}", self.activities)?;
        writeln!(f, "locations:    {}", self.locations)?;
        writeln!(
            f,
            "trajectories: {} ({} train / {} test)",
            self.train_trajectories + self.test_trajectories,
            self.train_trajectories,
            self.test_trajectories
        )?;
        writeln!(f, "records:      {} ({} rows skipped)", self.records, self.skipped_rows)?;
        match self.recurring_share() {
            Some(share) => writeln!(
                f,
                "rec / exp:    {:.1}% / {:.1}% ({} / {})",
                100.0 * share,
                100.0 * (1.0 - share),
                self.recurring,
                self.explorative
            ),
            None => writeln!(f, "rec / exp:    no test targets"),
        }
    }
}

/// Parse, clean, segment, split, tag, and persist a dataset bundle.
pub fn cmd_prepare(
    input: &Path,
    format: RawFormat,
    out: &Path,
    config: &RunConfig,
) -> Result<PrepareStats, CliError> {
    let outcome = parse_checkins(input, format)?;
    let params = PrepareParams {
        hour_slots: config.hour_slots,
        gap_hours: config.gap_hours,
        min_trajectory_len: config.min_trajectory_len,
        min_count: config.min_count,
    };
    let dataset = prepare(outcome.records, &params)?;
    write_bundle(&dataset, &params, out)?;
    Ok(PrepareStats::of(&dataset, outcome.skipped))
}

/// Build the hierarchical graph for a bundle and persist it. `d_h_km`
/// overrides the config threshold; `csv_dir` additionally dumps every
/// matrix as dense CSV.
pub fn cmd_graph(
    bundle_path: &Path,
    out: &Path,
    d_h_km: Option<f64>,
    config: &RunConfig,
    csv_dir: Option<&Path>,
) -> Result<String, CliError> {
    let (dataset, dataset_hash, _) = read_bundle(bundle_path)?;
    let d_h = d_h_km.unwrap_or(config.d_h_km);
    if !(d_h > 0.0) {
        return Err(CliError::Usage(format!("d_h_km must be positive, got {d_h}")));
    }
    let graph = build_graph(
        &dataset.gps,
        &dataset.affiliation,
        &dataset.train,
        dataset.n_activities,
        d_h,
    )?;
    let hash = write_graph_bundle(&graph, &dataset_hash, dataset.hour_slots, out)?;
    if let Some(dir) = csv_dir {
        std::fs::create_dir_all(dir).map_err(internal_io)?;
        for (name, matrix) in [
            ("a_loc", &graph.a_loc),
            ("m_act", &graph.m_act),
            ("a_act", &graph.a_act),
            ("a_loc_act", &graph.a_loc_act),
            ("a_cc_new", &graph.a_cc_new),
        ] {
            write_dense_csv(matrix, &dir.join(format!("{name}.csv")))?;
        }
    }
    Ok(hash)
}

/// Summary returned by training.
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_loss: f64,
    pub checkpoint: std::path::PathBuf,
}

/// Train on a prepared bundle and graph; persist the best checkpoint and a
/// JSONL epoch log.
pub fn cmd_train(
    bundle_path: &Path,
    graph_path: &Path,
    out: &Path,
    log_path: Option<&Path>,
    config: &RunConfig,
) -> Result<TrainSummary, CliError> {
    config.validate()?;
    let (dataset, dataset_hash, _) = read_bundle(bundle_path)?;
    let (graph, graph_hash, graph_dataset_hash, _) = read_graph_bundle(graph_path)?;
    if graph_dataset_hash != dataset_hash {
        return Err(CliError::Input(format!(
            "graph was built for dataset {graph_dataset_hash}, bundle is {dataset_hash}"
        )));
    }
    let outcome = train(&dataset, &graph, config)?;
    outcome
        .params
        .save_checkpoint(out, &dataset_hash, &graph_hash)?;
    if let Some(path) = log_path {
        write_log(&outcome.log, path).map_err(internal_io)?;
    }
    Ok(TrainSummary {
        epochs_run: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        final_loss: outcome.log.last().map(|l| l.loss_total).unwrap_or(f64::NAN),
        checkpoint: out.to_path_buf(),
    })
}

/// What to evaluate.
pub enum EvalSource<'a> {
    Checkpoint { path: &'a Path, graph: &'a Path },
    Markov { restrict_to_user_history: bool },
}

/// Evaluate a checkpoint or the Markov baseline on a bundle's test split.
pub fn cmd_eval(
    source: EvalSource<'_>,
    bundle_path: &Path,
    ks_main: &[usize],
    ks_explorative: &[usize],
    out: Option<&Path>,
    csv_out: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let (dataset, dataset_hash, _) = read_bundle(bundle_path)?;
    let samples = crate::eval::test_samples(&dataset);

    let report = match source {
        EvalSource::Checkpoint { path, graph } => {
            let (params, ckpt_dataset_hash, ckpt_graph_hash) = ModelParams::load_checkpoint(path)?;
            if ckpt_dataset_hash != dataset_hash {
                return Err(CliError::Input(format!(
                    "checkpoint was trained on dataset {ckpt_dataset_hash}, bundle is {dataset_hash}"
                )));
            }
            let (graph, graph_hash, graph_dataset_hash, _) = read_graph_bundle(graph)?;
            if graph_hash != ckpt_graph_hash {
                return Err(CliError::Input(format!(
                    "checkpoint was trained with graph {ckpt_graph_hash}, provided graph is {graph_hash}"
                )));
            }
            if graph_dataset_hash != dataset_hash {
                return Err(CliError::Input(
                    "graph does not belong to the evaluated bundle".into(),
                ));
            }
            let ranker = ModelRanker::new(&params, &graph);
            evaluate(
                &ranker,
                &samples,
                ks_main,
                ks_explorative,
                &dataset_hash,
                &params.config.content_hash(),
            )
        }
        EvalSource::Markov {
            restrict_to_user_history,
        } => {
            let model = markov_fit(&dataset.train, dataset.n_locations, dataset.n_users);
            let ranker = MarkovRanker {
                model,
                restrict_to_user_history,
            };
            evaluate(&ranker, &samples, ks_main, ks_explorative, &dataset_hash, "none")
        }
    };

    if let Some(path) = out {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?,
        )
        .map_err(internal_io)?;
    }
    if let Some(path) = csv_out {
        std::fs::write(path, report.to_csv()).map_err(internal_io)?;
    }
    Ok(report)
}

/// Hyperparameters the sweep command can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    DistanceThreshold,
    ConfidenceWc,
    LambdaR,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "d_h_km" | "d_h" => Ok(Self::DistanceThreshold),
            "w_c" => Ok(Self::ConfidenceWc),
            "lambda_r" => Ok(Self::LambdaR),
            other => Err(format!(
                "unknown sweep parameter {other:?}; expected d_h_km, w_c, or lambda_r"
            )),
        }
    }
}

/// Train and evaluate once per grid value, reusing the prepared bundle.
/// Emits one CSV row per value with main-setting metrics at `ks_main`.
pub fn cmd_sweep(
    param: SweepParam,
    grid: &[f64],
    bundle_path: &Path,
    config: &RunConfig,
    ks_main: &[usize],
    out: &Path,
) -> Result<(), CliError> {
    if grid.is_empty() {
        return Err(CliError::Usage("empty sweep grid".into()));
    }
    let (dataset, dataset_hash, _) = read_bundle(bundle_path)?;
    let samples = crate::eval::test_samples(&dataset);

    let mut csv = String::from("param,value");
    for k in ks_main {
        csv.push_str(&format!(",recall@{k}"));
    }
    for k in ks_main {
        csv.push_str(&format!(",ndcg@{k}"));
    }
    csv.push('\n');

    let param_name = match param {
        SweepParam::DistanceThreshold => "d_h_km",
        SweepParam::ConfidenceWc => "w_c",
        SweepParam::LambdaR => "lambda_r",
    };

    let mut base_graph: Option<HierarchicalGraph> = None;
    for &value in grid {
        let mut config = config.clone();
        match param {
            SweepParam::DistanceThreshold => config.d_h_km = value,
            SweepParam::ConfidenceWc => config.w_c = value,
            SweepParam::LambdaR => config.lambda_r = value,
        }
        config.validate()?;

        // The graph depends only on d_h_km; rebuild it per value only when
        // that is the swept parameter.
        let graph = match (param, &base_graph) {
            (SweepParam::DistanceThreshold, _) | (_, None) => {
                let g = build_graph(
                    &dataset.gps,
                    &dataset.affiliation,
                    &dataset.train,
                    dataset.n_activities,
                    config.d_h_km,
                )?;
                if param != SweepParam::DistanceThreshold {
                    base_graph = Some(g.clone());
                }
                g
            }
            (_, Some(g)) => g.clone(),
        };

        let outcome = train(&dataset, &graph, &config)?;
        let ranker = ModelRanker::new(&outcome.params, &graph);
        let report = evaluate(
            &ranker,
            &samples,
            ks_main,
            &[],
            &dataset_hash,
            &config.content_hash(),
        );
        let main = &report.settings["main"];
        csv.push_str(&format!("{param_name},{value}"));
        for k in ks_main {
            match main.metrics.get(k).copied().flatten() {
                Some(p) => csv.push_str(&format!(",{}", p.recall)),
                None => csv.push(','),
            }
        }
        for k in ks_main {
            match main.metrics.get(k).copied().flatten() {
                Some(p) => csv.push_str(&format!(",{}", p.ndcg)),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    std::fs::write(out, csv).map_err(internal_io)?;
    Ok(())
}

/// Dump one attention matrix of a trained checkpoint as dense CSV.
///
/// `layer` is one of `location`, `affiliation`, `activity`. The dump is the
/// full attention matrix of the chosen head; rows sum to one over the
/// admitted entries.
pub fn cmd_inspect_attention(
    checkpoint: &Path,
    graph_path: &Path,
    layer: &str,
    head: usize,
    out: &Path,
) -> Result<(), CliError> {
    let (params, _, ckpt_graph_hash) = ModelParams::load_checkpoint(checkpoint)?;
    let (graph, graph_hash, _, _) = read_graph_bundle(graph_path)?;
    if graph_hash != ckpt_graph_hash {
        return Err(CliError::Input(format!(
            "checkpoint was trained with graph {ckpt_graph_hash}, provided graph is {graph_hash}"
        )));
    }

    let tape = crate::tensor::Tape::new();
    let bound = params.bind(&tape);
    let (_, layers) = crate::model::hgat_forward(&bound, &graph, true);
    let available: Vec<&str> = layers.iter().map(|l| l.layer).collect();
    let chosen = layers
        .iter()
        .find(|l| l.layer == layer)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "layer {layer:?} not in this model; available: {available:?}"
            ))
        })?;
    let alpha = chosen.heads.get(head).ok_or_else(|| {
        CliError::Usage(format!(
            "head {head} out of range; layer has {} heads",
            chosen.heads.len()
        ))
    })?;
    write_dense_csv(alpha, out)?;
    Ok(())
}

/// Generate a synthetic corpus; write the JSONL records and, optionally,
/// the ground-truth metadata.
pub fn cmd_synth(
    spec: &SynthSpec,
    out: &Path,
    meta_out: Option<&Path>,
) -> Result<SynthMeta, CliError> {
    let (jsonl, meta) = synth_generate(spec)?;
    std::fs::write(out, jsonl).map_err(internal_io)?;
    if let Some(path) = meta_out {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&meta).map_err(|e| CliError::Internal(e.to_string()))?,
        )
        .map_err(internal_io)?;
    }
    Ok(meta)
}

/// Load a config file (or defaults), apply `key=value` overrides, then an
/// optional seed override.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut config = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            ConfigError::Io(inner) => CliError::Input(format!("cannot read {}: {inner}", p.display())),
            other => CliError::Usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    for entry in overrides {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {entry:?}")))?;
        config = config.with_override(key.trim(), value.trim())?;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}
