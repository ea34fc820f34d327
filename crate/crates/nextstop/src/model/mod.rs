//! The prediction network.
//!
//! Embedding tables feed a hierarchical graph attention pass that produces
//! per-location and per-activity representations; two LSTM encoders consume
//! the embedded history enriched with those representations; an activity
//! decoder and a residually fused location decoder emit the logits.
//!
//! [`ModelParams`] owns the plain parameter matrices. For each forward pass
//! they are bound onto a fresh tape with [`ModelParams::bind`], which yields
//! differentiable handles plus a name registry for gradient extraction.

mod gat;
mod temporal;

pub use gat::{gat_layer, hgat_forward, GatOutput, GraphReps, LayerAttention};
pub use temporal::{forward, lstm_step, Logits};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::tensor::{read_archive, write_archive, ArchiveError, Matrix, Tape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const ELU_ALPHA: f64 = 1.0;
const INIT_RANGE: f64 = 0.05;
const WEEKDAYS: usize = 7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("checkpoint: {0}")]
    Archive(#[from] ArchiveError),
    #[error("checkpoint meta: {0}")]
    Meta(String),
    #[error("checkpoint tensor {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
}

/// Vocabulary sizes the tables are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub users: usize,
    pub activities: usize,
    pub locations: usize,
    pub hour_slots: usize,
}

impl Sizes {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            users: dataset.n_users,
            activities: dataset.n_activities,
            locations: dataset.n_locations,
            hour_slots: dataset.hour_slots,
        }
    }
}

/// Which components exist, resolved from the ablation flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantPlan {
    /// Activity embeddings, encoder, decoder, and loss.
    pub use_activity: bool,
    /// Location-layer graph representation feeds the location encoder.
    pub use_h_l: bool,
    /// Activity-layer graph representation feeds both encoders.
    pub use_h_c: bool,
    /// Direct location decoder (the residual path).
    pub use_res_path: bool,
    /// Activity-conditioned location decoder (the fused path).
    pub use_fusion_path: bool,
    /// Effective mixing factor between the two paths.
    pub lambda_r: f64,
}

impl VariantPlan {
    pub fn resolve(config: &RunConfig) -> Self {
        let flags = config.variant;
        let use_activity = !flags.no_activity;
        let use_h_l = !flags.no_hgat;
        let use_h_c = use_h_l && !flags.no_agat && use_activity;
        let use_fusion_path = use_activity;
        let use_res_path = !flags.no_res;
        let lambda_r = if !use_fusion_path {
            1.0
        } else if !use_res_path {
            0.0
        } else {
            config.lambda_r
        };
        Self {
            use_activity,
            use_h_l,
            use_h_c,
            use_res_path,
            use_fusion_path,
            lambda_r,
        }
    }

    /// Input width of the activity encoder.
    pub fn activity_input_dim(&self, config: &RunConfig) -> usize {
        config.user_dim
            + config.time_dim
            + config.embed_dim
            + if self.use_h_c { config.graph_dim } else { 0 }
    }

    /// Input width of the location encoder.
    pub fn location_input_dim(&self, config: &RunConfig) -> usize {
        config.user_dim
            + config.time_dim
            + config.embed_dim
            + if self.use_h_c { config.graph_dim } else { 0 }
            + if self.use_h_l { config.graph_dim } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    /// `out x in`.
    pub weight: Matrix,
    /// `out x 1`.
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `d_in x d_out` projection.
    pub weight: Matrix,
    /// `d_out x 1` attention vector for the attending node.
    pub attn_src: Matrix,
    /// `d_out x 1` attention vector for the attended node.
    pub attn_dst: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    pub heads: Vec<HeadParams>,
    /// `(K * d_out) x d_final` output projection.
    pub proj: Matrix,
    /// `1 x d_final` bias row.
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4h x in` input weights; gates packed input, forget, cell, output.
    pub w_x: Matrix,
    /// `4h x h` recurrent weights.
    pub w_h: Matrix,
    pub b_x: Matrix,
    pub b_h: Matrix,
}

/// All trainable state of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: RunConfig,
    pub sizes: Sizes,
    pub plan: VariantPlan,

    pub user_emb: Matrix,
    pub act_emb: Option<Matrix>,
    pub loc_emb: Matrix,
    pub hour_emb: Matrix,
    pub week_emb: Matrix,

    pub gat_loc: Option<GatParams>,
    pub gat_affil: Option<GatParams>,
    pub gat_act: Option<GatParams>,

    pub lstm_act: Option<LstmParams>,
    pub lstm_loc: LstmParams,

    pub dec_act: Option<AffineParams>,
    pub dec_loc_res: Option<AffineParams>,
    pub dec_fuse_hidden: Option<AffineParams>,
    pub dec_loc: Option<AffineParams>,
}

impl ModelParams {
    pub fn new(config: &RunConfig, sizes: Sizes, seed: u64) -> Self {
        let plan = VariantPlan::resolve(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight =
            |rows: usize, cols: usize| Matrix::uniform(rows, cols, -INIT_RANGE, INIT_RANGE, &mut rng);

        let user_emb = weight(sizes.users, config.user_dim);
        let act_emb = plan
            .use_activity
            .then(|| weight(sizes.activities, config.embed_dim));
        let loc_emb = weight(sizes.locations, config.embed_dim);
        let hour_emb = weight(sizes.hour_slots, config.time_dim);
        let week_emb = weight(WEEKDAYS, config.time_dim);

        let gat = |d_in: usize, d_out: usize, d_final: usize, w: &mut dyn FnMut(usize, usize) -> Matrix| GatParams {
            heads: (0..config.attention_heads)
                .map(|_| HeadParams {
                    weight: w(d_in, d_out),
                    attn_src: w(d_out, 1),
                    attn_dst: w(d_out, 1),
                })
                .collect(),
            proj: w(config.attention_heads * d_out, d_final),
            bias: Matrix::zeros(1, d_final),
        };
        let gat_loc = plan
            .use_h_l
            .then(|| gat(config.embed_dim, config.graph_dim, config.graph_dim, &mut weight));
        let gat_affil = plan
            .use_h_c
            .then(|| gat(config.embed_dim, config.embed_dim, config.embed_dim, &mut weight));
        let gat_act = plan
            .use_h_c
            .then(|| gat(config.embed_dim, config.graph_dim, config.graph_dim, &mut weight));

        let lstm = |input: usize, w: &mut dyn FnMut(usize, usize) -> Matrix| LstmParams {
            w_x: w(4 * config.hidden_dim, input),
            w_h: w(4 * config.hidden_dim, config.hidden_dim),
            b_x: Matrix::zeros(4 * config.hidden_dim, 1),
            b_h: Matrix::zeros(4 * config.hidden_dim, 1),
        };
        let lstm_act = plan
            .use_activity
            .then(|| lstm(plan.activity_input_dim(config), &mut weight));
        let lstm_loc = lstm(plan.location_input_dim(config), &mut weight);

        let affine = |out: usize, input: usize, w: &mut dyn FnMut(usize, usize) -> Matrix| AffineParams {
            weight: w(out, input),
            bias: Matrix::zeros(out, 1),
        };
        let dec_act = plan
            .use_activity
            .then(|| affine(sizes.activities, config.hidden_dim, &mut weight));
        let dec_loc_res = plan
            .use_res_path
            .then(|| affine(sizes.locations, config.hidden_dim, &mut weight));
        let dec_fuse_hidden = plan
            .use_fusion_path
            .then(|| affine(config.hidden_dim, 2 * config.hidden_dim, &mut weight));
        let dec_loc = plan.use_fusion_path.then(|| {
            affine(
                sizes.locations,
                config.hidden_dim + sizes.activities,
                &mut weight,
            )
        });

        Self {
            config: config.clone(),
            sizes,
            plan,
            user_emb,
            act_emb,
            loc_emb,
            hour_emb,
            week_emb,
            gat_loc,
            gat_affil,
            gat_act,
            lstm_act,
            lstm_loc,
            dec_act,
            dec_loc_res,
            dec_fuse_hidden,
            dec_loc,
        }
    }

    /// Every parameter with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit(&mut |name, m| out.push((name, m)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, m| out.push((name, m)));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    // The two walkers must stay in lockstep; `named_and_named_mut_agree`
    // guards the name layout.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        f("embed.user".into(), &self.user_emb);
        if let Some(m) = &self.act_emb {
            f("embed.activity".into(), m);
        }
        f("embed.location".into(), &self.loc_emb);
        f("embed.hour".into(), &self.hour_emb);
        f("embed.weekday".into(), &self.week_emb);
        for (prefix, gat) in [
            ("gat_loc", &self.gat_loc),
            ("gat_affil", &self.gat_affil),
            ("gat_act", &self.gat_act),
        ] {
            if let Some(g) = gat {
                for (k, head) in g.heads.iter().enumerate() {
                    f(format!("{prefix}.head{k}.weight"), &head.weight);
                    f(format!("{prefix}.head{k}.attn_src"), &head.attn_src);
                    f(format!("{prefix}.head{k}.attn_dst"), &head.attn_dst);
                }
                f(format!("{prefix}.proj"), &g.proj);
                f(format!("{prefix}.bias"), &g.bias);
            }
        }
        for (prefix, lstm) in [("lstm_act", self.lstm_act.as_ref()), ("lstm_loc", Some(&self.lstm_loc))] {
            if let Some(l) = lstm {
                f(format!("{prefix}.w_x"), &l.w_x);
                f(format!("{prefix}.w_h"), &l.w_h);
                f(format!("{prefix}.b_x"), &l.b_x);
                f(format!("{prefix}.b_h"), &l.b_h);
            }
        }
        for (prefix, affine) in [
            ("dec_act", &self.dec_act),
            ("dec_loc_res", &self.dec_loc_res),
            ("dec_fuse_hidden", &self.dec_fuse_hidden),
            ("dec_loc", &self.dec_loc),
        ] {
            if let Some(a) = affine {
                f(format!("{prefix}.weight"), &a.weight);
                f(format!("{prefix}.bias"), &a.bias);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Matrix)) {
        f("embed.user".into(), &mut self.user_emb);
        if let Some(m) = &mut self.act_emb {
            f("embed.activity".into(), m);
        }
        f("embed.location".into(), &mut self.loc_emb);
        f("embed.hour".into(), &mut self.hour_emb);
        f("embed.weekday".into(), &mut self.week_emb);
        for (prefix, gat) in [
            ("gat_loc", &mut self.gat_loc),
            ("gat_affil", &mut self.gat_affil),
            ("gat_act", &mut self.gat_act),
        ] {
            if let Some(g) = gat {
                for (k, head) in g.heads.iter_mut().enumerate() {
                    f(format!("{prefix}.head{k}.weight"), &mut head.weight);
                    f(format!("{prefix}.head{k}.attn_src"), &mut head.attn_src);
                    f(format!("{prefix}.head{k}.attn_dst"), &mut head.attn_dst);
                }
                f(format!("{prefix}.proj"), &mut g.proj);
                f(format!("{prefix}.bias"), &mut g.bias);
            }
        }
        for (prefix, lstm) in [
            ("lstm_act", self.lstm_act.as_mut()),
            ("lstm_loc", Some(&mut self.lstm_loc)),
        ] {
            if let Some(l) = lstm {
                f(format!("{prefix}.w_x"), &mut l.w_x);
                f(format!("{prefix}.w_h"), &mut l.w_h);
                f(format!("{prefix}.b_x"), &mut l.b_x);
                f(format!("{prefix}.b_h"), &mut l.b_h);
            }
        }
        for (prefix, affine) in [
            ("dec_act", &mut self.dec_act),
            ("dec_loc_res", &mut self.dec_loc_res),
            ("dec_fuse_hidden", &mut self.dec_fuse_hidden),
            ("dec_loc", &mut self.dec_loc),
        ] {
            if let Some(a) = affine {
                f(format!("{prefix}.weight"), &mut a.weight);
                f(format!("{prefix}.bias"), &mut a.bias);
            }
        }
    }

    /// Bind every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let mut registry = Vec::new();
        let mut leaf = |name: String, m: &Matrix| {
            let t = tape.leaf(m.clone(), true);
            registry.push((name, t.clone()));
            t
        };

        let user_emb = leaf("embed.user".into(), &self.user_emb);
        let act_emb = self.act_emb.as_ref().map(|m| leaf("embed.activity".into(), m));
        let loc_emb = leaf("embed.location".into(), &self.loc_emb);
        let hour_emb = leaf("embed.hour".into(), &self.hour_emb);
        let week_emb = leaf("embed.weekday".into(), &self.week_emb);

        let bind_gat = |prefix: &str, g: &GatParams, leaf: &mut dyn FnMut(String, &Matrix) -> Tensor| BoundGat {
            heads: g
                .heads
                .iter()
                .enumerate()
                .map(|(k, head)| BoundHead {
                    weight: leaf(format!("{prefix}.head{k}.weight"), &head.weight),
                    attn_src: leaf(format!("{prefix}.head{k}.attn_src"), &head.attn_src),
                    attn_dst: leaf(format!("{prefix}.head{k}.attn_dst"), &head.attn_dst),
                })
                .collect(),
            proj: leaf(format!("{prefix}.proj"), &g.proj),
            bias: leaf(format!("{prefix}.bias"), &g.bias),
        };
        let gat_loc = self.gat_loc.as_ref().map(|g| bind_gat("gat_loc", g, &mut leaf));
        let gat_affil = self.gat_affil.as_ref().map(|g| bind_gat("gat_affil", g, &mut leaf));
        let gat_act = self.gat_act.as_ref().map(|g| bind_gat("gat_act", g, &mut leaf));

        let bind_lstm = |prefix: &str, l: &LstmParams, leaf: &mut dyn FnMut(String, &Matrix) -> Tensor| BoundLstm {
            w_x: leaf(format!("{prefix}.w_x"), &l.w_x),
            w_h: leaf(format!("{prefix}.w_h"), &l.w_h),
            b_x: leaf(format!("{prefix}.b_x"), &l.b_x),
            b_h: leaf(format!("{prefix}.b_h"), &l.b_h),
        };
        let lstm_act = self.lstm_act.as_ref().map(|l| bind_lstm("lstm_act", l, &mut leaf));
        let lstm_loc = bind_lstm("lstm_loc", &self.lstm_loc, &mut leaf);

        let bind_affine = |prefix: &str, a: &AffineParams, leaf: &mut dyn FnMut(String, &Matrix) -> Tensor| BoundAffine {
            weight: leaf(format!("{prefix}.weight"), &a.weight),
            bias: leaf(format!("{prefix}.bias"), &a.bias),
        };
        let dec_act = self.dec_act.as_ref().map(|a| bind_affine("dec_act", a, &mut leaf));
        let dec_loc_res = self
            .dec_loc_res
            .as_ref()
            .map(|a| bind_affine("dec_loc_res", a, &mut leaf));
        let dec_fuse_hidden = self
            .dec_fuse_hidden
            .as_ref()
            .map(|a| bind_affine("dec_fuse_hidden", a, &mut leaf));
        let dec_loc = self.dec_loc.as_ref().map(|a| bind_affine("dec_loc", a, &mut leaf));

        BoundParams {
            plan: self.plan,
            hidden_dim: self.config.hidden_dim,
            user_emb,
            act_emb,
            loc_emb,
            hour_emb,
            week_emb,
            gat_loc,
            gat_affil,
            gat_act,
            lstm_act,
            lstm_loc,
            dec_act,
            dec_loc_res,
            dec_fuse_hidden,
            dec_loc,
            registry,
        }
    }

    // -- checkpoint io ------------------------------------------------------

    pub fn save_checkpoint(
        &self,
        path: &Path,
        dataset_hash: &str,
        graph_hash: &str,
    ) -> Result<(), ModelError> {
        let meta = serde_json::json!({
            "kind": "checkpoint",
            "config": self.config,
            "sizes": self.sizes,
            "dataset_hash": dataset_hash,
            "graph_hash": graph_hash,
        });
        let named = self.named();
        let tensors: Vec<(String, &Matrix)> =
            named.iter().map(|(n, m)| (n.clone(), *m)).collect();
        write_archive(path, meta, &tensors)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, String, String), ModelError> {
        let (meta, tensors) = read_archive(path)?;
        let config: RunConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| ModelError::Meta("missing config".into()))?,
        )
        .map_err(|e| ModelError::Meta(e.to_string()))?;
        let sizes: Sizes = serde_json::from_value(
            meta.get("sizes")
                .cloned()
                .ok_or_else(|| ModelError::Meta("missing sizes".into()))?,
        )
        .map_err(|e| ModelError::Meta(e.to_string()))?;
        let dataset_hash = meta
            .get("dataset_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let graph_hash = meta
            .get("graph_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();

        let mut params = Self::new(&config, sizes, config.seed);
        let stored: std::collections::BTreeMap<String, Matrix> = tensors.into_iter().collect();
        for (name, slot) in params.named_mut() {
            let m = stored
                .get(&name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if m.shape() != slot.shape() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: slot.shape(),
                    found: m.shape(),
                });
            }
            *slot = m.clone();
        }
        Ok((params, dataset_hash, graph_hash))
    }
}

/// Tape-bound mirror of [`ModelParams`].
pub struct BoundParams {
    pub plan: VariantPlan,
    pub hidden_dim: usize,
    pub user_emb: Tensor,
    pub act_emb: Option<Tensor>,
    pub loc_emb: Tensor,
    pub hour_emb: Tensor,
    pub week_emb: Tensor,
    pub gat_loc: Option<BoundGat>,
    pub gat_affil: Option<BoundGat>,
    pub gat_act: Option<BoundGat>,
    pub lstm_act: Option<BoundLstm>,
    pub lstm_loc: BoundLstm,
    pub dec_act: Option<BoundAffine>,
    pub dec_loc_res: Option<BoundAffine>,
    pub dec_fuse_hidden: Option<BoundAffine>,
    pub dec_loc: Option<BoundAffine>,
    /// Every bound leaf by name, for gradient extraction.
    pub registry: Vec<(String, Tensor)>,
}

pub struct BoundHead {
    pub weight: Tensor,
    pub attn_src: Tensor,
    pub attn_dst: Tensor,
}

pub struct BoundGat {
    pub heads: Vec<BoundHead>,
    pub proj: Tensor,
    pub bias: Tensor,
}

pub struct BoundLstm {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b_x: Tensor,
    pub b_h: Tensor,
}

pub struct BoundAffine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl BoundAffine {
    /// `weight @ x + bias` for a column vector input.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.weight.matmul(x).add(&self.bias)
    }
}
