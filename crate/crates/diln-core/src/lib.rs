//! Interest life-cycle modeling for multi-task recommendation ranking.
//!
//! A user's engagement with an interest category moves through phases:
//! unexplored, emergent, long-term (stable) and declining. This crate builds
//! the full DILN (Deep Interest Life-cycle Network) stack that turns that
//! trajectory into a ranking signal:
//!
//! - [`gsu`]: general search unit retrieving the behaviors most relevant to a
//!   candidate item (hard category match or soft embedding relevance),
//! - [`histogram`]: per-action-type activity histograms over the user's most
//!   recent active dates,
//! - [`ilem`]: a 1D-CNN histogram encoder plus a vector-quantized life-cycle
//!   clustering with straight-through reconstruction training,
//! - [`model`]: an MMOE multi-task ranker whose shared input and expert layers
//!   are rescaled by bounded gates driven by the life-cycle cluster center,
//! - [`training`] / [`evaluation`]: joint optimization and GAUC-based offline
//!   evaluation with life-cycle slice and cluster-activation reports.
//!
//! Everything runs on [`nn`], a small deterministic reverse-mode autodiff core
//! in double precision, so every gradient path (including the stop-gradient
//! contracts of the VQ block) is checkable against finite differences.

pub mod config;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod gsu;
pub mod histogram;
pub mod ilem;
pub mod model;
pub mod nn;
pub mod training;
mod util;

pub use data::{ActionType, BehaviorEvent, DatasetSplit, LifecyclePhase, RankingSample};
pub use error::CoreError;
pub use ilem::{Codebook, LifecycleCode};
pub use model::{ModelConfig, ModelVariant};
pub use nn::{ParamStore, Tape, Tensor};
pub use training::TrainConfig;
