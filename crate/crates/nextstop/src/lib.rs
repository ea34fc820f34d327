//! Activity-aware next-location prediction over check-in data.
//!
//! The crate covers the full pipeline:
//!
//! - [`dataset`]: parsing raw check-in files, cleaning, time discretization,
//!   session segmentation, chronological train/test splitting, and tagging of
//!   test targets as recurring or explorative.
//! - [`hiergraph`]: the three-layer hierarchical graph over locations,
//!   localized activities, and activities (spatial adjacency, time-slot
//!   co-occurrence, affiliation and identity blocks).
//! - [`tensor`]: a small reverse-mode autodiff engine over dense f64
//!   matrices; everything the model differentiates runs on it.
//! - [`model`]: embedding tables, multi-head graph attention, the
//!   hierarchical attention pass, dual LSTM encoders, and the residual
//!   activity/location decoders, plus the ablation variants.
//! - [`training`]: history-weighted confidence labels, soft cross-entropy,
//!   the joint loss, Adam, and the epoch loop with checkpointing.
//! - [`eval`]: Recall@K / NDCG@K over main, recurring, and explorative
//!   settings, and a Markov-chain baseline.
//! - [`cli`]: configuration and the commands wired together by the `nextstop`
//!   binary, including a synthetic corpus generator for desk-scale runs.
//!
//! Each major capability has a runnable demo under `examples/`; start with
//! `cargo run --example train_synthetic`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod hiergraph;
pub mod model;
pub mod tensor;
pub mod training;
