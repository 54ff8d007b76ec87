//! Fitness aggregation, evaluators and the evaluation cache.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::{count_params, ArchDigest, Architecture, LayerType, ModelShapeConfig, ParamCountError};

/// Weighting factors. Accuracy and robustness enter in percent, parameters
/// in millions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitnessWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        FitnessWeights { mu1: 1.0, mu2: 1.0, mu3: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalScores {
    pub accuracy_pct: f64,
    pub robustness_pct: f64,
    pub param_count: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitnessError {
    #[error("{name} = {value} is outside [0, 100]")]
    PercentOutOfRange { name: &'static str, value: f64 },
    #[error("fitness is not finite ({0}); check the weights")]
    NonFinite(f64),
}

fn check_pct(name: &'static str, value: f64) -> Result<(), FitnessError> {
    if value.is_finite() && (0.0..=100.0).contains(&value) {
        Ok(())
    } else {
        Err(FitnessError::PercentOutOfRange { name, value })
    }
}

impl EvalScores {
    pub fn new(accuracy_pct: f64, robustness_pct: f64, param_count: u64) -> Result<Self, FitnessError> {
        check_pct("accuracy_pct", accuracy_pct)?;
        check_pct("robustness_pct", robustness_pct)?;
        Ok(EvalScores { accuracy_pct, robustness_pct, param_count })
    }
}

/// `mu1 * acc + mu2 * rob + mu3 * (-params / 1e6)`.
pub fn aggregate(scores: &EvalScores, weights: &FitnessWeights) -> Result<f64, FitnessError> {
    check_pct("accuracy_pct", scores.accuracy_pct)?;
    check_pct("robustness_pct", scores.robustness_pct)?;
    let millions = scores.param_count as f64 / 1e6;
    let f = weights.mu1 * scores.accuracy_pct + weights.mu2 * scores.robustness_pct + weights.mu3 * -millions;
    if f.is_finite() {
        Ok(f)
    } else {
        Err(FitnessError::NonFinite(f))
    }
}

/// Who produced a score.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    Surrogate,
    Worker(String),
    /// Evaluation failed on every attempt.
    Failed,
}

/// One evaluated individual. Failed evaluations have no scores and fitness
/// `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredIndividual {
    pub id: u64,
    pub birth_generation: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u64>,
    pub arch: Architecture,
    pub scores: Option<EvalScores>,
    #[serde(with = "fitness_value")]
    pub fitness: f64,
    pub eval_source: EvalSource,
}

impl ScoredIndividual {
    pub fn is_failed(&self) -> bool {
        self.scores.is_none()
    }
}

/// JSON has no infinities; the failure sentinel is written as `null`.
mod fitness_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("evaluation failed: {0}")]
    Failed(String),
    #[error("no evaluation workers are available")]
    PoolEmpty,
    #[error(transparent)]
    Params(#[from] ParamCountError),
    #[error(transparent)]
    Scores(#[from] FitnessError),
}

pub trait Evaluator {
    fn evaluate(&self, arch: &Architecture) -> Result<EvalScores, EvalError>;
    fn source(&self) -> EvalSource;

    /// Scores together with whoever produced them. Backends whose source
    /// varies per call (worker pools) override this.
    fn evaluate_with_source(&self, arch: &Architecture) -> Result<(EvalScores, EvalSource), EvalError> {
        let scores = self.evaluate(arch)?;
        Ok((scores, self.source()))
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, arch: &Architecture) -> Result<EvalScores, EvalError> {
        (**self).evaluate(arch)
    }
    fn source(&self) -> EvalSource {
        (**self).source()
    }
    fn evaluate_with_source(&self, arch: &Architecture) -> Result<(EvalScores, EvalSource), EvalError> {
        (**self).evaluate_with_source(arch)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&self, arch: &Architecture) -> Result<EvalScores, EvalError> {
        (**self).evaluate(arch)
    }
    fn source(&self) -> EvalSource {
        (**self).source()
    }
    fn evaluate_with_source(&self, arch: &Architecture) -> Result<(EvalScores, EvalSource), EvalError> {
        (**self).evaluate_with_source(arch)
    }
}

/// Per-layer-type coefficients, indexed conv, sep_conv, attn, glu.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeTable {
    pub conv: f64,
    pub sep_conv: f64,
    pub attn: f64,
    pub glu: f64,
}

impl TypeTable {
    pub fn get(&self, t: LayerType) -> f64 {
        match t {
            LayerType::Conv => self.conv,
            LayerType::SepConv => self.sep_conv,
            LayerType::Attn => self.attn,
            LayerType::Glu => self.glu,
        }
    }
}

/// One objective of the surrogate landscape:
///
/// ```text
/// base + per_active_node * active
///      + edge_quadratic * (edges - edge_peak)^2
///      + sum_t (type_linear[t] * c_t + type_quadratic[t] * c_t^2)
///      + per_repeat * repeats + per_width_unit * hidden_width / 128
/// ```
///
/// where `c_t` counts active nodes of type `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landscape {
    pub base: f64,
    pub per_active_node: f64,
    pub edge_peak: f64,
    pub edge_quadratic: f64,
    pub type_linear: TypeTable,
    pub type_quadratic: TypeTable,
    pub per_repeat: f64,
    pub per_width_unit: f64,
}

impl Landscape {
    pub fn value(&self, f: &ArchFeatures) -> f64 {
        let de = f.edges as f64 - self.edge_peak;
        let mut v = self.base + self.per_active_node * f.active_nodes as f64 + self.edge_quadratic * de * de;
        for t in LayerType::ALL {
            let c = f.type_counts[t.index()] as f64;
            v += self.type_linear.get(t) * c + self.type_quadratic.get(t) * c * c;
        }
        v + self.per_repeat * f.repeats as f64 + self.per_width_unit * f.hidden_width as f64 / 128.0
    }
}

/// Deterministic synthetic landscape used in place of real distillation.
///
/// The default tables are fixtures, not measurements: accuracy rises with
/// active nodes and falls with attention-heavy blocks; robustness rises with
/// active nodes, peaks at six edges, and rewards a moderate number of
/// attention and separable-conv layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub accuracy: Landscape,
    pub robustness: Landscape,
    pub noise_seed: u64,
    /// Half-width of the uniform noise added to each percentage.
    pub noise_amplitude: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            accuracy: Landscape {
                base: 72.0,
                per_active_node: 1.5,
                edge_peak: 7.0,
                edge_quadratic: -0.05,
                type_linear: TypeTable { conv: 1.0, sep_conv: 1.0, attn: -1.5, glu: 1.0 },
                type_quadratic: TypeTable { conv: 0.0, sep_conv: 0.0, attn: 0.0, glu: 0.0 },
                per_repeat: 0.5,
                per_width_unit: 1.0,
            },
            robustness: Landscape {
                base: 6.0,
                per_active_node: 5.0,
                edge_peak: 6.0,
                edge_quadratic: -0.6,
                type_linear: TypeTable { conv: -2.0, sep_conv: 4.0, attn: 5.0, glu: -2.0 },
                type_quadratic: TypeTable { conv: 0.0, sep_conv: -1.0, attn: -1.25, glu: 0.0 },
                per_repeat: 1.0,
                per_width_unit: 1.0,
            },
            noise_seed: 0,
            noise_amplitude: 0.5,
        }
    }
}

/// Architecture features the surrogate reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchFeatures {
    pub active_nodes: usize,
    pub edges: usize,
    pub type_counts: [usize; 4],
    pub repeats: u32,
    pub hidden_width: u32,
}

impl ArchFeatures {
    pub fn of(arch: &Architecture) -> Self {
        let active = arch.active_nodes();
        let mut type_counts = [0usize; 4];
        for &v in &active {
            if let Some(node) = arch.block.node(v) {
                type_counts[node.layer_type.index()] += 1;
            }
        }
        ArchFeatures {
            active_nodes: active.len(),
            edges: arch.block.edges.len(),
            type_counts,
            repeats: arch.repeats,
            hidden_width: arch.hidden_width,
        }
    }
}

fn unit_noise(seed: u64, salt: u8, arch: &Architecture) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([salt]);
    h.update(arch.to_canonical().as_bytes());
    let bytes: [u8; 32] = h.finalize().into();
    let x = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    // 53 high bits -> [0, 1)
    (x >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    pub config: SurrogateConfig,
    pub shape: ModelShapeConfig,
}

impl SurrogateEvaluator {
    pub fn new(config: SurrogateConfig, shape: ModelShapeConfig) -> Self {
        SurrogateEvaluator { config, shape }
    }
}

pub fn surrogate_eval(arch: &Architecture, cfg: &SurrogateConfig, shape: &ModelShapeConfig) -> Result<EvalScores, EvalError> {
    let features = ArchFeatures::of(arch);
    let amp = cfg.noise_amplitude;
    let acc = cfg.accuracy.value(&features) + amp * (2.0 * unit_noise(cfg.noise_seed, 0, arch) - 1.0);
    let rob = cfg.robustness.value(&features) + amp * (2.0 * unit_noise(cfg.noise_seed, 1, arch) - 1.0);
    let params = count_params(arch, shape)?.total;
    Ok(EvalScores::new(acc.clamp(0.0, 100.0), rob.clamp(0.0, 100.0), params)?)
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, arch: &Architecture) -> Result<EvalScores, EvalError> {
        surrogate_eval(arch, &self.config, &self.shape)
    }

    fn source(&self) -> EvalSource {
        EvalSource::Surrogate
    }
}

/// Content-addressed score cache keyed by [`Architecture::digest`].
///
/// Concurrent misses on one key may both evaluate; the first stored result
/// is kept.
#[derive(Debug, Default)]
pub struct FitnessCache {
    entries: Mutex<HashMap<ArchDigest, (EvalScores, EvalSource)>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Miss,
}

impl FitnessCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, arch: &Architecture) -> Option<(EvalScores, EvalSource)> {
        self.entries.lock().expect("cache lock").get(&arch.digest()).cloned()
    }

    pub fn insert(&self, arch: &Architecture, scores: EvalScores, source: EvalSource) {
        self.entries.lock().expect("cache lock").entry(arch.digest()).or_insert((scores, source));
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    /// Returns cached scores or evaluates and stores them. Failures are
    /// passed through and never stored.
    pub fn cached_eval<E: Evaluator + ?Sized>(
        &self,
        arch: &Architecture,
        evaluator: &E,
    ) -> Result<(EvalScores, EvalSource, Lookup), EvalError> {
        if let Some((scores, source)) = self.get(arch) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((scores, source, Lookup::Hit));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let (scores, source) = evaluator.evaluate_with_source(arch)?;
        self.insert(arch, scores, source.clone());
        let (scores, source) = self.get(arch).unwrap_or((scores, source));
        Ok((scores, source, Lookup::Miss))
    }
}
