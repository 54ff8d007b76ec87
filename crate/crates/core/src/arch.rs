//! Student architecture model.
//!
//! An [`Architecture`] is a repeat count, the hidden width between blocks and
//! one [`BlockGraph`]. The block has `n` vertices: `v0` is the block input,
//! `v(n-1)` the output node and `v1..v(n-2)` are computational nodes. Edges
//! only run from a lower to a higher vertex ID, so vertex order is always a
//! topological order.
//!
//! The canonical record is compact JSON with a fixed field order and edges
//! sorted ascending. Two architectures are structurally equal iff their
//! canonical records are byte-equal, and [`ArchDigest`] is the SHA-256 of
//! that record.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::space::SearchSpaceDef;

pub type Edge = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    Conv,
    SepConv,
    Attn,
    Glu,
}

impl LayerType {
    pub const ALL: [LayerType; 4] = [LayerType::Conv, LayerType::SepConv, LayerType::Attn, LayerType::Glu];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerType::Conv => "conv",
            LayerType::SepConv => "sep_conv",
            LayerType::Attn => "attn",
            LayerType::Glu => "glu",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LayerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Inputs zero-padded to the widest one, then summed.
    Add,
    /// Inputs one-padded to the widest one, then multiplied.
    Mul,
    /// Inputs concatenated along the hidden dimension.
    Concat,
}

impl InputMode {
    pub const ALL: [InputMode; 3] = [InputMode::Add, InputMode::Mul, InputMode::Concat];
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Add => "add",
            InputMode::Mul => "mul",
            InputMode::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Swish,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::None, Activation::Relu, Activation::Swish];
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Swish => "swish",
        })
    }
}

/// Layer parameter carried by GLU nodes, which have none.
pub const GLU_PARAM: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub layer_type: LayerType,
    /// Kernel width for conv/sep_conv, head count for attn, [`GLU_PARAM`] for glu.
    pub layer_param: u32,
    pub output_width: u32,
    pub input_mode: InputMode,
    pub activation: Activation,
}

impl NodeSpec {
    /// A kernel-width-1 convolution, i.e. a position-wise linear layer.
    pub fn linear(width: u32) -> Self {
        NodeSpec {
            layer_type: LayerType::Conv,
            layer_param: 1,
            output_width: width,
            input_mode: InputMode::Add,
            activation: Activation::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputNodeSpec {
    pub input_mode: InputMode,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "BlockRecord")]
pub struct BlockGraph {
    pub n: usize,
    /// Specs for `v1..v(n-2)`; `nodes[k]` describes vertex `k + 1`.
    pub nodes: Vec<NodeSpec>,
    pub output_node: OutputNodeSpec,
    pub edges: BTreeSet<Edge>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    n: usize,
    nodes: Vec<NodeSpec>,
    output_node: OutputNodeSpec,
    edges: Vec<Edge>,
}

impl TryFrom<BlockRecord> for BlockGraph {
    type Error = String;

    fn try_from(rec: BlockRecord) -> Result<Self, Self::Error> {
        let mut edges = BTreeSet::new();
        for e in &rec.edges {
            if !edges.insert(*e) {
                return Err(format!("duplicate edge [{}, {}]", e.0, e.1));
            }
        }
        Ok(BlockGraph {
            n: rec.n,
            nodes: rec.nodes,
            output_node: rec.output_node,
            edges,
        })
    }
}

impl BlockGraph {
    pub fn sink(&self) -> usize {
        self.n.saturating_sub(1)
    }

    pub fn node(&self, vertex: usize) -> Option<&NodeSpec> {
        vertex.checked_sub(1).and_then(|k| self.nodes.get(k))
    }

    pub fn node_mut(&mut self, vertex: usize) -> Option<&mut NodeSpec> {
        vertex.checked_sub(1).and_then(move |k| self.nodes.get_mut(k))
    }

    /// Forward reachability from `v0`, ignoring malformed edges.
    fn reach_forward(&self) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        if self.n == 0 {
            return seen;
        }
        seen[0] = true;
        // Edges are sorted by source, and sources precede targets, so one
        // ascending sweep suffices.
        for &(i, j) in &self.edges {
            if i < j && j < self.n && seen[i] {
                seen[j] = true;
            }
        }
        seen
    }

    fn reach_backward(&self) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        if self.n == 0 {
            return seen;
        }
        seen[self.n - 1] = true;
        for &(i, j) in self.edges.iter().rev() {
            if i < j && j < self.n && seen[j] {
                seen[i] = true;
            }
        }
        seen
    }

    /// True when some directed path leads from `v0` to `v(n-1)`.
    pub fn has_io_path(&self) -> bool {
        self.n >= 2 && self.reach_forward()[self.n - 1]
    }

    /// Computational vertices lying on at least one `v0 -> v(n-1)` path.
    pub fn active_nodes(&self) -> BTreeSet<usize> {
        if self.n < 3 {
            return BTreeSet::new();
        }
        let fwd = self.reach_forward();
        let bwd = self.reach_backward();
        (1..self.n - 1).filter(|&v| fwd[v] && bwd[v]).collect()
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|e| e.1 == v).count()
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|e| e.0 == v).count()
    }

    pub fn max_edges(&self) -> usize {
        self.n * self.n.saturating_sub(1) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub repeats: u32,
    pub hidden_width: u32,
    pub block: BlockGraph,
}

/// Fixed-width content digest of an architecture's canonical record.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchDigest(pub [u8; 32]);

impl fmt::Display for ArchDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ArchDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ArchDigest({})", &hex::encode(self.0)[..16])
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("malformed architecture record at line {line}, column {column}: {cause}")]
    Syntax { line: usize, column: usize, cause: String },
    #[error("architecture out of range: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl From<serde_json::Error> for ParseError {
    fn from(e: serde_json::Error) -> Self {
        let cause = e.to_string();
        // serde_json appends " at line X column Y"; keep only the cause.
        let cause = match cause.rfind(" at line ") {
            Some(idx) => cause[..idx].to_string(),
            None => cause,
        };
        ParseError::Syntax { line: e.line(), column: e.column(), cause }
    }
}

impl Architecture {
    /// Canonical record: compact JSON, fixed field order, sorted edges.
    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("architecture serialization is infallible")
    }

    pub fn to_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serialization is infallible")
    }

    /// Decodes a record without range checks. Malformed JSON, unknown keys
    /// and duplicate edges are still rejected.
    pub fn decode(text: &str) -> Result<Self, ParseError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Decodes a record and validates it against the default search space
    /// for the record's node count.
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let arch = Self::decode(text)?;
        let space = SearchSpaceDef::with_nodes(arch.block.n);
        arch.checked_in(&space)
    }

    /// Decodes a record and validates it against `space`.
    pub fn parse_in(text: &str, space: &SearchSpaceDef) -> Result<Self, ParseError> {
        Self::decode(text)?.checked_in(space)
    }

    fn checked_in(self, space: &SearchSpaceDef) -> Result<Self, ParseError> {
        let report = validate(&self, space);
        if report.ok {
            Ok(self)
        } else {
            Err(ParseError::Invalid(report.violations))
        }
    }

    pub fn digest(&self) -> ArchDigest {
        ArchDigest(Sha256::digest(self.to_canonical().as_bytes()).into())
    }

    pub fn active_nodes(&self) -> BTreeSet<usize> {
        self.block.active_nodes()
    }
}

/// One failed invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("block has {n} nodes; at least 3 are required")]
    TooFewNodes { n: usize },
    #[error("block has {n} nodes but the search space uses {expected}")]
    NodeCountMismatch { n: usize, expected: usize },
    #[error("block lists {found} computational nodes, expected {expected}")]
    NodeListLength { found: usize, expected: usize },
    #[error("edge [{0}, {1}] does not run from a lower to a higher vertex")]
    EdgeNotForward(usize, usize),
    #[error("edge [{0}, {1}] references a vertex outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("edge count below {min} (found {count})")]
    EdgeCountBelowMin { count: usize, min: usize },
    #[error("edge count above {max} (found {count})")]
    EdgeCountAboveMax { count: usize, max: usize },
    #[error("no directed path from v0 to v{sink}")]
    NoIoPath { sink: usize },
    #[error("repeats {value} outside range {}", fmt_range(.allowed))]
    RepeatsOutOfRange { value: u32, allowed: Vec<u32> },
    #[error("hidden_width {value} outside range {}", fmt_range(.allowed))]
    HiddenWidthOutOfRange { value: u32, allowed: Vec<u32> },
    #[error("node v{vertex}: layer type {layer_type} not in the search space")]
    LayerTypeNotAllowed { vertex: usize, layer_type: LayerType },
    #[error("node v{vertex}: {layer_type} layer_param {value} outside range {}", fmt_range(.allowed))]
    LayerParamOutOfRange { vertex: usize, layer_type: LayerType, value: u32, allowed: Vec<u32> },
    #[error("node v{vertex}: output_width {value} outside range {}", fmt_range(.allowed))]
    OutputWidthOutOfRange { vertex: usize, value: u32, allowed: Vec<u32> },
    #[error("node v{vertex}: input mode {mode} not in the search space")]
    InputModeNotAllowed { vertex: usize, mode: InputMode },
    #[error("node v{vertex}: activation {activation} not in the search space")]
    ActivationNotAllowed { vertex: usize, activation: Activation },
    #[error("node v{vertex}: output_width {width} not divisible by {heads} attention heads")]
    AttnHeadsIndivisible { vertex: usize, width: u32, heads: u32 },
}

/// Formats a value set, collapsing contiguous integer runs: `{3..8}`.
pub(crate) fn fmt_range(values: &[u32]) -> String {
    let contiguous = values.len() > 2 && values.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous {
        format!("{{{}..{}}}", values[0], values[values.len() - 1])
    } else {
        let parts: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        format!("{{{}}}", parts.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Warning {
    /// Computational vertices not on any input-to-output path.
    InactiveNodes(Vec<usize>),
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::InactiveNodes(v) => {
                let ids: Vec<String> = v.iter().map(|x| format!("v{x}")).collect();
                write!(f, "inactive nodes (no input-to-output path): {}", ids.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
    pub warnings: Vec<Warning>,
}

/// Checks every structural invariant and every attribute range of `space`.
/// Never panics on malformed input.
pub fn validate(arch: &Architecture, space: &SearchSpaceDef) -> ValidationReport {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let block = &arch.block;
    let n = block.n;

    if !space.repeats.contains(&arch.repeats) {
        violations.push(Violation::RepeatsOutOfRange { value: arch.repeats, allowed: space.repeats.clone() });
    }
    if !space.hidden_widths.contains(&arch.hidden_width) {
        violations.push(Violation::HiddenWidthOutOfRange {
            value: arch.hidden_width,
            allowed: space.hidden_widths.clone(),
        });
    }

    if n < 3 {
        violations.push(Violation::TooFewNodes { n });
        return ValidationReport { ok: false, violations, warnings };
    }
    if n != space.n {
        violations.push(Violation::NodeCountMismatch { n, expected: space.n });
    }
    if block.nodes.len() != n - 2 {
        violations.push(Violation::NodeListLength { found: block.nodes.len(), expected: n - 2 });
    }

    let mut edges_ok = true;
    for &(i, j) in &block.edges {
        if j >= n || i >= n {
            violations.push(Violation::EdgeOutOfRange(i, j, n));
            edges_ok = false;
        } else if i >= j {
            violations.push(Violation::EdgeNotForward(i, j));
            edges_ok = false;
        }
    }
    let count = block.edges.len();
    if count < space.edge_min() {
        violations.push(Violation::EdgeCountBelowMin { count, min: space.edge_min() });
    }
    if count > space.edge_max() {
        violations.push(Violation::EdgeCountAboveMax { count, max: space.edge_max() });
    }
    if edges_ok && !block.has_io_path() {
        violations.push(Violation::NoIoPath { sink: n - 1 });
    }

    for (k, node) in block.nodes.iter().enumerate() {
        let vertex = k + 1;
        if !space.layer_types.contains(&node.layer_type) {
            violations.push(Violation::LayerTypeNotAllowed { vertex, layer_type: node.layer_type });
        }
        let allowed = space.params_for(node.layer_type);
        if !allowed.contains(&node.layer_param) {
            violations.push(Violation::LayerParamOutOfRange {
                vertex,
                layer_type: node.layer_type,
                value: node.layer_param,
                allowed: allowed.to_vec(),
            });
        }
        if !space.output_widths.contains(&node.output_width) {
            violations.push(Violation::OutputWidthOutOfRange {
                vertex,
                value: node.output_width,
                allowed: space.output_widths.clone(),
            });
        }
        if node.layer_type == LayerType::Attn
            && (node.layer_param == 0 || node.output_width % node.layer_param != 0)
        {
            violations.push(Violation::AttnHeadsIndivisible {
                vertex,
                width: node.output_width,
                heads: node.layer_param,
            });
        }
        if !space.input_modes.contains(&node.input_mode) {
            violations.push(Violation::InputModeNotAllowed { vertex, mode: node.input_mode });
        }
        if !space.activations.contains(&node.activation) {
            violations.push(Violation::ActivationNotAllowed { vertex, activation: node.activation });
        }
    }
    if !space.input_modes.contains(&block.output_node.input_mode) {
        violations.push(Violation::InputModeNotAllowed { vertex: n - 1, mode: block.output_node.input_mode });
    }
    if !space.activations.contains(&block.output_node.activation) {
        violations.push(Violation::ActivationNotAllowed {
            vertex: n - 1,
            activation: block.output_node.activation,
        });
    }

    if edges_ok {
        let active = block.active_nodes();
        let inactive: Vec<usize> = (1..n - 1).filter(|v| !active.contains(v)).collect();
        if !inactive.is_empty() {
            warnings.push(Warning::InactiveNodes(inactive));
        }
    }

    ValidationReport { ok: violations.is_empty(), violations, warnings }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShapeConfig {
    pub vocab_size: u64,
    pub max_positions: u64,
    pub num_segments: u64,
    pub num_classes: u64,
}

impl Default for ModelShapeConfig {
    fn default() -> Self {
        ModelShapeConfig { vocab_size: 30_522, max_positions: 128, num_segments: 2, num_classes: 2 }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamCountError {
    #[error("parameter count overflows u64 ({0})")]
    Overflow(&'static str),
    #[error("architecture is not countable: {0}")]
    Malformed(String),
}

/// Parameter totals split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: u64,
    pub per_block: u64,
    pub blocks: u64,
    pub classifier: u64,
    pub total: u64,
}

struct Checked(&'static str);

impl Checked {
    fn mul(&self, a: u64, b: u64) -> Result<u64, ParamCountError> {
        a.checked_mul(b).ok_or(ParamCountError::Overflow(self.0))
    }
    fn add(&self, a: u64, b: u64) -> Result<u64, ParamCountError> {
        a.checked_add(b).ok_or(ParamCountError::Overflow(self.0))
    }
}

/// Weights of a linear map `w_in -> w_out` with bias.
fn linear(c: &Checked, w_in: u64, w_out: u64) -> Result<u64, ParamCountError> {
    c.add(c.mul(w_in, w_out)?, w_out)
}

/// Parameters of one computational layer given its merged input width.
pub fn layer_params(
    layer_type: LayerType,
    layer_param: u32,
    w_in: u64,
    w_out: u64,
) -> Result<u64, ParamCountError> {
    let c = Checked("layer");
    let k = u64::from(layer_param);
    match layer_type {
        LayerType::Conv => c.add(c.mul(c.mul(k, w_in)?, w_out)?, w_out),
        // depthwise k x w_in without bias, pointwise w_in -> w_out with bias
        LayerType::SepConv => c.add(c.mul(k, w_in)?, linear(&c, w_in, w_out)?),
        // q/k/v projections from w_in plus an output projection
        LayerType::Attn => c.add(c.mul(3, linear(&c, w_in, w_out)?)?, linear(&c, w_out, w_out)?),
        LayerType::Glu => c.mul(2, linear(&c, w_in, w_out)?),
    }
}

pub(crate) fn merge_width(mode: InputMode, widths: &[u64]) -> Result<u64, ParamCountError> {
    match widths {
        [] => Err(ParamCountError::Malformed("merge with no inputs".into())),
        [w] => Ok(*w),
        _ => match mode {
            InputMode::Add | InputMode::Mul => Ok(widths.iter().copied().max().unwrap_or(0)),
            InputMode::Concat => widths
                .iter()
                .try_fold(0u64, |acc, &w| acc.checked_add(w))
                .ok_or(ParamCountError::Overflow("concat width")),
        },
    }
}

/// Parameters of one block instance. Inactive nodes contribute nothing; the
/// output node adds a width adapter when its merged width differs from
/// `hidden_width`.
pub fn block_params(arch: &Architecture) -> Result<u64, ParamCountError> {
    let block = &arch.block;
    let n = block.n;
    if n < 3 || block.nodes.len() != n - 2 {
        return Err(ParamCountError::Malformed(format!("block with n={n} and {} nodes", block.nodes.len())));
    }
    if block.edges.iter().any(|&(i, j)| i >= j || j >= n) {
        return Err(ParamCountError::Malformed("edge outside the forward range".into()));
    }
    if !block.has_io_path() {
        return Err(ParamCountError::Malformed("no input-to-output path".into()));
    }
    let active = block.active_nodes();
    let c = Checked("block");
    let hidden = u64::from(arch.hidden_width);
    let mut width: Vec<Option<u64>> = vec![None; n];
    width[0] = Some(hidden);
    let mut total = 0u64;

    let incoming = |v: usize, width: &[Option<u64>]| -> Vec<u64> {
        block.edges.iter().filter(|e| e.1 == v).filter_map(|e| width[e.0]).collect()
    };

    for v in 1..n - 1 {
        if !active.contains(&v) {
            continue;
        }
        let node = &block.nodes[v - 1];
        let w_in = merge_width(node.input_mode, &incoming(v, &width))?;
        let w_out = u64::from(node.output_width);
        total = c.add(total, layer_params(node.layer_type, node.layer_param, w_in, w_out)?)?;
        width[v] = Some(w_out);
    }
    let merged = merge_width(block.output_node.input_mode, &incoming(n - 1, &width))?;
    if merged != hidden {
        total = c.add(total, linear(&c, merged, hidden)?)?;
    }
    Ok(total)
}

/// Total trainable weights: embeddings, `repeats` independent block copies
/// and the classifier.
pub fn count_params(arch: &Architecture, shape: &ModelShapeConfig) -> Result<ParamBreakdown, ParamCountError> {
    let c = Checked("model");
    let hidden = u64::from(arch.hidden_width);
    let rows = c.add(c.add(shape.vocab_size, shape.max_positions)?, shape.num_segments)?;
    let embedding = c.mul(rows, hidden)?;
    let per_block = block_params(arch)?;
    let blocks = c.mul(per_block, u64::from(arch.repeats))?;
    let classifier = linear(&c, hidden, shape.num_classes)?;
    let total = c.add(c.add(embedding, blocks)?, classifier)?;
    Ok(ParamBreakdown { embedding, per_block, blocks, classifier, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(layer_type: LayerType, layer_param: u32, output_width: u32) -> NodeSpec {
        NodeSpec { layer_type, layer_param, output_width, input_mode: InputMode::Add, activation: Activation::None }
    }

    pub(crate) fn chain() -> Architecture {
        Architecture {
            repeats: 3,
            hidden_width: 128,
            block: BlockGraph {
                n: 6,
                nodes: vec![NodeSpec::linear(128); 4],
                output_node: OutputNodeSpec { input_mode: InputMode::Add, activation: Activation::None },
                edges: [(0, 1), (1, 2), (2, 5)].into_iter().collect(),
            },
        }
    }

    fn with_edges(edges: &[Edge]) -> BlockGraph {
        let mut b = chain().block;
        b.edges = edges.iter().copied().collect();
        b
    }

    #[test]
    fn minimal_chain_is_valid() {
        let r = validate(&chain(), &SearchSpaceDef::default());
        assert!(r.ok, "{:?}", r.violations);
        assert_eq!(r.warnings, vec![Warning::InactiveNodes(vec![3, 4])]);
    }

    #[test]
    fn two_edges_is_below_minimum() {
        let mut a = chain();
        a.block.edges = [(0, 1), (1, 5)].into_iter().collect();
        let r = validate(&a, &SearchSpaceDef::default());
        assert!(!r.ok);
        assert!(r.violations.iter().any(|v| v.to_string().starts_with("edge count below 3")));
    }

    #[test]
    fn dangling_component_is_a_warning_not_a_violation() {
        let mut a = chain();
        a.block.edges = [(0, 1), (1, 5), (2, 3)].into_iter().collect();
        let r = validate(&a, &SearchSpaceDef::default());
        assert!(r.ok, "{:?}", r.violations);
        assert_eq!(r.warnings, vec![Warning::InactiveNodes(vec![2, 3, 4])]);
    }

    #[test]
    fn malformed_edges_do_not_panic() {
        let mut a = chain();
        a.block.edges = [(3, 1), (0, 9), (0, 5)].into_iter().collect();
        let r = validate(&a, &SearchSpaceDef::default());
        assert!(!r.ok);
        assert!(r.violations.contains(&Violation::EdgeNotForward(3, 1)));
        assert!(r.violations.contains(&Violation::EdgeOutOfRange(0, 9, 6)));
        a.block.n = 1;
        assert!(!validate(&a, &SearchSpaceDef::default()).ok);
    }

    #[test]
    fn active_nodes_examples() {
        assert_eq!(with_edges(&[(0, 1), (1, 5)]).active_nodes(), [1].into());
        assert_eq!(with_edges(&[(0, 1), (1, 2), (2, 5), (0, 3), (3, 5)]).active_nodes(), [1, 2, 3].into());
        assert_eq!(with_edges(&[(0, 1), (1, 5), (2, 3)]).active_nodes(), [1].into());
    }

    #[test]
    fn single_layer_counts() {
        assert_eq!(layer_params(LayerType::Conv, 3, 128, 256).unwrap(), 98_560);
        // 2 * (128*128 + 128)
        assert_eq!(layer_params(LayerType::Glu, GLU_PARAM, 128, 128).unwrap(), 33_024);
        assert_eq!(layer_params(LayerType::SepConv, 5, 128, 256).unwrap(), 5 * 128 + 128 * 256 + 256);
        assert_eq!(layer_params(LayerType::Attn, 8, 128, 256).unwrap(), 3 * (128 * 256 + 256) + 256 * 256 + 256);
    }

    #[test]
    fn classifier_count() {
        let b = count_params(&chain(), &ModelShapeConfig::default()).unwrap();
        assert_eq!(b.classifier, 258);
        assert_eq!(b.embedding, (30_522 + 128 + 2) * 128);
        assert_eq!(b.per_block, 2 * (128 * 128 + 128));
        assert_eq!(b.total, b.embedding + 3 * b.per_block + b.classifier);
    }

    #[test]
    fn overflow_is_reported() {
        let shape = ModelShapeConfig { vocab_size: u64::MAX - 10, ..Default::default() };
        assert!(matches!(count_params(&chain(), &shape), Err(ParamCountError::Overflow(_))));
    }

    #[test]
    fn concat_merge_sums_and_adapter_appears() {
        let mut a = chain();
        a.block.nodes[0] = node(LayerType::Conv, 1, 256);
        a.block.output_node.input_mode = InputMode::Concat;
        a.block.edges = [(0, 1), (0, 5), (1, 5)].into_iter().collect();
        // v1: 128 -> 256; output merges 128 + 256 = 384, adapter 384 -> 128
        let expected = (128 * 256 + 256) + (384 * 128 + 128);
        assert_eq!(block_params(&a).unwrap(), expected);
    }

    #[test]
    fn canonical_record_sorts_edges_and_fixes_field_order() {
        let a = chain();
        let mut b = chain();
        b.block.edges = BTreeSet::new();
        for e in [(2, 5), (0, 1), (1, 2)] {
            b.block.edges.insert(e);
        }
        assert_eq!(a.to_canonical(), b.to_canonical());
        assert_eq!(a.digest(), b.digest());
        let text = a.to_canonical();
        assert!(text.starts_with(r#"{"repeats":3,"hidden_width":128,"block":{"n":6,"nodes":[{"layer_type":"conv","layer_param":1,"output_width":128,"input_mode":"add","activation":"none"}"#));
        assert!(text.ends_with(r#""output_node":{"input_mode":"add","activation":"none"},"edges":[[0,1],[1,2],[2,5]]}}"#));
    }

    #[test]
    fn parse_round_trip_and_digest() {
        let a = chain();
        let back = Architecture::parse(&a.to_canonical()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.digest(), a.digest());
    }

    #[test]
    fn activation_change_changes_digest() {
        let a = chain();
        let mut b = chain();
        b.block.nodes[1].activation = Activation::Swish;
        assert_ne!(a.to_canonical(), b.to_canonical());
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn parse_rejects_out_of_range_repeats_naming_range() {
        let text = chain().to_canonical().replacen(r#""repeats":3"#, r#""repeats":9"#, 1);
        let err = Architecture::parse(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("repeats 9 outside range {3..8}"), "{msg}");
    }

    #[test]
    fn parse_reports_position() {
        let err = Architecture::parse("{\"repeats\": 3,\n \"hidden_width\": oops}").unwrap_err();
        match err {
            ParseError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_duplicate_edges_and_unknown_keys() {
        let dup = chain().to_canonical().replace("[[0,1],", "[[0,1],[0,1],");
        assert!(Architecture::decode(&dup).unwrap_err().to_string().contains("duplicate edge"));
        let unknown = chain().to_canonical().replacen("{\"repeats\"", "{\"bogus\":1,\"repeats\"", 1);
        assert!(Architecture::decode(&unknown).unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn range_formatting() {
        assert_eq!(fmt_range(&[3, 4, 5, 6, 7, 8]), "{3..8}");
        assert_eq!(fmt_range(&[128, 256, 512]), "{128, 256, 512}");
    }
}
