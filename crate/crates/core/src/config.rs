//! The single search configuration file.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::ModelShapeConfig;
use crate::dispatch::DispatchConfig;
use crate::engine::{EngineConfig, EngineError};
use crate::fitness::SurrogateConfig;
use crate::space::{SearchSpaceDef, SpaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    #[default]
    Surrogate,
    Workers,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorConfig {
    pub kind: EvaluatorKind,
    /// Address to accept worker connections on.
    pub listen: Option<String>,
    /// Worker endpoints to dial.
    pub workers: Vec<String>,
    /// Workers that must say hello before the search starts.
    pub min_workers: usize,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig { kind: EvaluatorKind::Surrogate, listen: None, workers: Vec::new(), min_workers: 1 }
    }
}

/// Distillation and attack settings forwarded verbatim to workers.
pub fn default_eval_config() -> Value {
    json!({
        "kd_weights": { "soft_target": 0.5, "probe": 0.25, "hidden": 0.25 },
        "temperature": 2.0,
        "learning_rate": 5e-4,
        "epochs": 15,
        "similarity_threshold": 0.7,
        "robustness_samples": 200,
        "dataset": "toy_sst2",
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub engine: EngineConfig,
    pub space: SearchSpaceDef,
    pub shape: ModelShapeConfig,
    pub surrogate: SurrogateConfig,
    pub dispatch: DispatchConfig,
    pub evaluator: EvaluatorConfig,
    pub eval_config: Value,
    /// Generations between checkpoints.
    pub checkpoint_every: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            engine: EngineConfig::default(),
            space: SearchSpaceDef::default(),
            shape: ModelShapeConfig::default(),
            surrogate: SurrogateConfig::default(),
            dispatch: DispatchConfig::default(),
            evaluator: EvaluatorConfig::default(),
            eval_config: default_eval_config(),
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("checkpoint_every must be at least 1")]
    CheckpointInterval,
}

/// A configuration together with the digest of the bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: SearchConfig,
    pub digest: String,
}

impl SearchConfig {
    pub fn from_json(text: &str) -> Result<LoadedConfig, ConfigError> {
        let config: SearchConfig = serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            // serde_json appends the position, which is reported separately
            let message = match message.rfind(" at line ") {
                Some(idx) => message[..idx].to_string(),
                None => message,
            };
            ConfigError::Parse { line: e.line(), column: e.column(), message }
        })?;
        config.check()?;
        Ok(LoadedConfig { config, digest: hex::encode(Sha256::digest(text.as_bytes())) })
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.space.clone().normalized()?;
        self.engine.check()?;
        if self.checkpoint_every < 1 {
            return Err(ConfigError::CheckpointInterval);
        }
        Ok(())
    }
}
