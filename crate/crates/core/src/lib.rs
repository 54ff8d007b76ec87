//! Robustness-aware evolutionary search over DAG-structured student blocks.
//!
//! A student network is an embedding layer, a stack of repeated blocks and a
//! max-pool classifier. Each block is a small DAG whose computational
//! vertices pick a layer type (conv, separable conv, self-attention, GLU),
//! a layer parameter, an output width, an input-merge mode and an
//! activation. The engine runs a steady-state tournament evolution over that
//! space and scores every candidate by
//!
//! ```text
//! fitness = mu1 * accuracy% + mu2 * robustness% - mu3 * params / 1e6
//! ```
//!
//! Candidate scores come either from a deterministic surrogate landscape
//! ([`fitness::SurrogateEvaluator`]) or from external evaluation workers
//! reached through the line-delimited protocol in [`dispatch`].
//!
//! Module map:
//!
//! - [`arch`]: architecture types, validation, active subgraph, parameter
//!   counting, canonical records and digests.
//! - [`space`]: search-space definition, membership, the simplest member,
//!   seeded sampling and exhaustive enumeration of restricted spaces.
//! - [`evolution`]: the mutation operators with repair and the edit distance.
//! - [`fitness`]: fitness aggregation, evaluators, the surrogate and the cache.
//! - [`engine`]: population, tournament, steady-state loop, checkpoints.
//! - [`dispatch`]: wire protocol, job tracking and worker supervision.
//! - [`analysis`]: grouped accuracy/robustness statistics over a history.
//! - [`config`]: the single search configuration file.

pub mod analysis;
pub mod arch;
pub mod config;
pub mod dispatch;
pub mod engine;
pub mod evolution;
pub mod fitness;
pub mod rng;
pub mod space;

pub use arch::{
    Activation, ArchDigest, Architecture, BlockGraph, InputMode, LayerType, ModelShapeConfig,
    NodeSpec, OutputNodeSpec,
};
pub use engine::{Engine, EngineConfig, SearchResult};
pub use fitness::{EvalScores, FitnessWeights, ScoredIndividual};
pub use space::SearchSpaceDef;
