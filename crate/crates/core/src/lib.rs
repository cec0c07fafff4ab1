//! Hard-aware deeply cascaded metric embedding.
//!
//! A cascade of `K` fully connected sub-networks of increasing depth, each
//! trained with a contrastive loss on the pairs its predecessors found hard,
//! together with the retrieval metrics used to compare it against plain and
//! single-model hard-mining baselines.
//!
//! Module map:
//! - [`math`]: dense matrices, forward/backward rules, finite-difference checks
//! - [`cascade`]: the network, forward pass, descriptors
//! - [`checkpoint`]: the on-disk model format
//! - [`mining`]: pair enumeration, hard selection, gradient routing
//! - [`data`]: datasets, CSV, synthetic clusters, class-balanced sampling
//! - [`trainer`]: the SGD loop and its baselines
//! - [`eval`]: Recall@K, MAP, distance histograms, LDA score

pub mod cascade;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod math;
pub mod mining;
pub mod trainer;

pub use cascade::{init_model, CascadeConfig, CascadeModel, ForwardCache, ParamSet};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{load_csv, save_csv, synth_clusters, Dataset, SamplerConfig, SynthConfig};
pub use error::{HdcError, Result};
pub use eval::{evaluate, EvalOptions, EvalReport, HistogramStats};
pub use math::{GradCheckReport, Matrix};
pub use mining::{cascade_mine, MiningPlan, PairSet, RankBy};
pub use trainer::{train, TrainConfig, TrainLog, TrainMode};
