//! Deterministic federated-learning simulator with trust-driven adaptive
//! aggregation.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, which is what the simulator and the
//! command-line runner use.

// `!(x > 0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod strategy;
pub mod trust;

pub use error::{FedError, Result};
pub use model::{Token, TokenSequence, END_TOKEN};
pub use params::Params;
pub use scalar::Scalar;

pub type ParameterVector = params::Params<f64>;
pub type ParameterVectorF32 = params::Params<f32>;
pub type ToyDialogueModel = model::BigramModel<f64>;
pub type ToyDialogueModelF32 = model::BigramModel<f32>;
pub type TrainConfig = model::TrainConfig<f64>;
pub type EmbeddingTable = trust::EmbeddingTable<f64>;
pub type TrustEvaluator = trust::TrustEvaluator<f64>;
pub type ScoredPair = trust::ScoredPair<f64>;
pub type AlphaSchedule = strategy::AlphaSchedule<f64>;
pub type StrategyConfig = strategy::StrategyConfig<f64>;
pub type FederationConfig = harness::FederationConfig<f64>;
pub type ExperimentResult = harness::ExperimentResult<f64>;
pub type MetricReport = metrics::MetricReport<f64>;
