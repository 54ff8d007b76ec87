//! Mutation operators and the architecture edit distance.
//!
//! One evolution step applies exactly one of: a new repeat count, a new
//! hidden width, an added edge, a removed edge, or a new value for one
//! attribute of one node. Resampled values always differ from the current
//! value, so every step moves. Edge operations are followed by dangling-node
//! repair; if the repaired block still violates the space the whole step is
//! redrawn, up to [`RETRY_CAP`] times.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{validate, Architecture, Edge, Violation};
use crate::rng;
use crate::space::SearchSpaceDef;

pub const RETRY_CAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeAttribute {
    LayerType,
    LayerParam,
    OutputWidth,
    InputMode,
    Activation,
}

impl fmt::Display for NodeAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeAttribute::LayerType => "layer_type",
            NodeAttribute::LayerParam => "layer_param",
            NodeAttribute::OutputWidth => "output_width",
            NodeAttribute::InputMode => "input_mode",
            NodeAttribute::Activation => "activation",
        })
    }
}

/// The applied operation, with enough detail to replay it by hand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EvolutionOp {
    ChangeRepeats { from: u32, to: u32 },
    ChangeWidth { from: u32, to: u32 },
    AddEdge { edge: Edge },
    RemoveEdge { edge: Edge },
    MutateNodeAttr { vertex: usize, attribute: NodeAttribute, from: String, to: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum OpKind {
    Repeats,
    Width,
    AddEdge,
    RemoveEdge,
    NodeAttr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "repair", rename_all = "snake_case")]
pub enum Repair {
    /// The layer parameter was redrawn from the new layer type's range.
    LayerParamResampled { vertex: usize, from: u32, to: u32 },
    /// A node with only incoming edges was given an outgoing edge.
    AddedOutgoing { vertex: usize, edge: Edge },
    /// A node with only outgoing edges was given an incoming edge.
    AddedIncoming { vertex: usize, edge: Edge },
    /// An earlier draw was discarded.
    Redrawn { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evolved {
    pub arch: Architecture,
    pub op: EvolutionOp,
    pub repairs: Vec<Repair>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvolutionError {
    #[error("input architecture is outside the search space: {0}")]
    InputOutsideSpace(Violation),
    #[error("no evolution operation is applicable in this search space")]
    NothingToMutate,
    #[error("evolution failed after {attempts} attempts; last violation: {last}")]
    RetriesExhausted { attempts: usize, last: String },
    #[error("architectures with {0} and {1} block nodes are incomparable")]
    Incomparable(usize, usize),
}

/// Distance tolerance: every evolution step stays strictly below `n`.
pub fn epsilon(space: &SearchSpaceDef) -> usize {
    space.n
}

/// Attribute-plus-edge edit count.
pub fn distance(a: &Architecture, b: &Architecture) -> Result<usize, EvolutionError> {
    if a.block.n != b.block.n || a.block.nodes.len() != b.block.nodes.len() {
        return Err(EvolutionError::Incomparable(a.block.n, b.block.n));
    }
    let mut d = usize::from(a.repeats != b.repeats) + usize::from(a.hidden_width != b.hidden_width);
    d += a.block.edges.symmetric_difference(&b.block.edges).count();
    for (x, y) in a.block.nodes.iter().zip(&b.block.nodes) {
        d += usize::from(x.layer_type != y.layer_type)
            + usize::from(x.layer_param != y.layer_param)
            + usize::from(x.output_width != y.output_width)
            + usize::from(x.input_mode != y.input_mode)
            + usize::from(x.activation != y.activation);
    }
    let (p, q) = (&a.block.output_node, &b.block.output_node);
    d += usize::from(p.input_mode != q.input_mode) + usize::from(p.activation != q.activation);
    Ok(d)
}

fn other<T: Copy + PartialEq, R: Rng + ?Sized>(values: &[T], current: T, rng: &mut R) -> Option<T> {
    let rest: Vec<T> = values.iter().copied().filter(|v| *v != current).collect();
    rest.choose(rng).copied()
}

fn has_alternative<T: PartialEq>(values: &[T], current: &T) -> bool {
    values.iter().any(|v| v != current)
}

/// Mutable attributes of `vertex` (the output node only varies in input
/// mode and activation).
fn mutable_attributes(arch: &Architecture, space: &SearchSpaceDef, vertex: usize) -> Vec<NodeAttribute> {
    let mut out = Vec::new();
    if vertex == arch.block.sink() {
        let o = &arch.block.output_node;
        if has_alternative(&space.input_modes, &o.input_mode) {
            out.push(NodeAttribute::InputMode);
        }
        if has_alternative(&space.activations, &o.activation) {
            out.push(NodeAttribute::Activation);
        }
        return out;
    }
    let Some(node) = arch.block.node(vertex) else { return out };
    if has_alternative(&space.layer_types, &node.layer_type) {
        out.push(NodeAttribute::LayerType);
    }
    if has_alternative(space.params_for(node.layer_type), &node.layer_param) {
        out.push(NodeAttribute::LayerParam);
    }
    if has_alternative(&space.output_widths, &node.output_width) {
        out.push(NodeAttribute::OutputWidth);
    }
    if has_alternative(&space.input_modes, &node.input_mode) {
        out.push(NodeAttribute::InputMode);
    }
    if has_alternative(&space.activations, &node.activation) {
        out.push(NodeAttribute::Activation);
    }
    out
}

fn legal_kinds(arch: &Architecture, space: &SearchSpaceDef) -> Vec<OpKind> {
    let mut kinds = Vec::new();
    if has_alternative(&space.repeats, &arch.repeats) {
        kinds.push(OpKind::Repeats);
    }
    if has_alternative(&space.hidden_widths, &arch.hidden_width) {
        kinds.push(OpKind::Width);
    }
    let e = arch.block.edges.len();
    if e < space.edge_max() && e < arch.block.max_edges() {
        kinds.push(OpKind::AddEdge);
    }
    if e > space.edge_min() {
        kinds.push(OpKind::RemoveEdge);
    }
    if (1..arch.block.n).any(|v| !mutable_attributes(arch, space, v).is_empty()) {
        kinds.push(OpKind::NodeAttr);
    }
    kinds
}

/// Connects nodes that have edges in only one direction. Each node is
/// repaired at most once per direction, so at most `n - 2` edges are added.
/// Returns false when some node cannot be repaired.
fn repair_dangling<R: Rng + ?Sized>(
    arch: &mut Architecture,
    forbidden: Option<Edge>,
    rng: &mut R,
    log: &mut Vec<Repair>,
) -> bool {
    let n = arch.block.n;
    loop {
        let mut changed = false;
        for v in 1..n - 1 {
            let edges = &arch.block.edges;
            let has_in = edges.iter().any(|e| e.1 == v);
            let has_out = edges.iter().any(|e| e.0 == v);
            if has_in && !has_out {
                let choices: Vec<Edge> = (v + 1..n).map(|j| (v, j)).filter(|e| Some(*e) != forbidden).collect();
                let Some(&edge) = choices.choose(rng) else { return false };
                arch.block.edges.insert(edge);
                log.push(Repair::AddedOutgoing { vertex: v, edge });
                changed = true;
            } else if has_out && !has_in {
                let choices: Vec<Edge> = (0..v).map(|i| (i, v)).filter(|e| Some(*e) != forbidden).collect();
                let Some(&edge) = choices.choose(rng) else { return false };
                arch.block.edges.insert(edge);
                log.push(Repair::AddedIncoming { vertex: v, edge });
                changed = true;
            }
        }
        if !changed {
            return true;
        }
    }
}

fn draw<R: Rng + ?Sized>(
    arch: &Architecture,
    space: &SearchSpaceDef,
    kind: OpKind,
    rng: &mut R,
    repairs: &mut Vec<Repair>,
) -> Option<(Architecture, EvolutionOp)> {
    let mut next = arch.clone();
    let op = match kind {
        OpKind::Repeats => {
            let to = other(&space.repeats, arch.repeats, rng)?;
            next.repeats = to;
            EvolutionOp::ChangeRepeats { from: arch.repeats, to }
        }
        OpKind::Width => {
            let to = other(&space.hidden_widths, arch.hidden_width, rng)?;
            next.hidden_width = to;
            EvolutionOp::ChangeWidth { from: arch.hidden_width, to }
        }
        OpKind::AddEdge => {
            let absent: Vec<Edge> =
                space.possible_edges().into_iter().filter(|e| !arch.block.edges.contains(e)).collect();
            let edge = *absent.choose(rng)?;
            next.block.edges.insert(edge);
            if !repair_dangling(&mut next, None, rng, repairs) {
                return None;
            }
            EvolutionOp::AddEdge { edge }
        }
        OpKind::RemoveEdge => {
            let present: Vec<Edge> = arch.block.edges.iter().copied().collect();
            let edge = *present.choose(rng)?;
            next.block.edges.remove(&edge);
            if !repair_dangling(&mut next, Some(edge), rng, repairs) {
                return None;
            }
            EvolutionOp::RemoveEdge { edge }
        }
        OpKind::NodeAttr => {
            let candidates: Vec<usize> =
                (1..arch.block.n).filter(|&v| !mutable_attributes(arch, space, v).is_empty()).collect();
            let vertex = *candidates.choose(rng)?;
            let attribute = *mutable_attributes(arch, space, vertex).choose(rng)?;
            mutate_attribute(&mut next, space, vertex, attribute, rng, repairs)?
        }
    };
    Some((next, op))
}

fn mutate_attribute<R: Rng + ?Sized>(
    next: &mut Architecture,
    space: &SearchSpaceDef,
    vertex: usize,
    attribute: NodeAttribute,
    rng: &mut R,
    repairs: &mut Vec<Repair>,
) -> Option<EvolutionOp> {
    let op = |from: String, to: String| EvolutionOp::MutateNodeAttr { vertex, attribute, from, to };
    if vertex == next.block.sink() {
        let o = &mut next.block.output_node;
        return match attribute {
            NodeAttribute::InputMode => {
                let to = other(&space.input_modes, o.input_mode, rng)?;
                let from = std::mem::replace(&mut o.input_mode, to);
                Some(op(from.to_string(), to.to_string()))
            }
            NodeAttribute::Activation => {
                let to = other(&space.activations, o.activation, rng)?;
                let from = std::mem::replace(&mut o.activation, to);
                Some(op(from.to_string(), to.to_string()))
            }
            _ => None,
        };
    }
    let node = next.block.node_mut(vertex)?;
    Some(match attribute {
        NodeAttribute::LayerType => {
            let to = other(&space.layer_types, node.layer_type, rng)?;
            let from = std::mem::replace(&mut node.layer_type, to);
            let old_param = node.layer_param;
            node.layer_param = *space.params_for(to).choose(rng)?;
            repairs.push(Repair::LayerParamResampled { vertex, from: old_param, to: node.layer_param });
            op(format!("{from}({old_param})"), format!("{to}({})", node.layer_param))
        }
        NodeAttribute::LayerParam => {
            let to = other(space.params_for(node.layer_type), node.layer_param, rng)?;
            let from = std::mem::replace(&mut node.layer_param, to);
            op(from.to_string(), to.to_string())
        }
        NodeAttribute::OutputWidth => {
            let to = other(&space.output_widths, node.output_width, rng)?;
            let from = std::mem::replace(&mut node.output_width, to);
            op(from.to_string(), to.to_string())
        }
        NodeAttribute::InputMode => {
            let to = other(&space.input_modes, node.input_mode, rng)?;
            let from = std::mem::replace(&mut node.input_mode, to);
            op(from.to_string(), to.to_string())
        }
        NodeAttribute::Activation => {
            let to = other(&space.activations, node.activation, rng)?;
            let from = std::mem::replace(&mut node.activation, to);
            op(from.to_string(), to.to_string())
        }
    })
}

/// Applies one random evolution operation to a member of `space`.
pub fn evolve_with<R: Rng + ?Sized>(
    arch: &Architecture,
    space: &SearchSpaceDef,
    rng: &mut R,
) -> Result<Evolved, EvolutionError> {
    let report = validate(arch, space);
    if let Some(v) = report.violations.into_iter().next() {
        return Err(EvolutionError::InputOutsideSpace(v));
    }
    let kinds = legal_kinds(arch, space);
    if kinds.is_empty() {
        return Err(EvolutionError::NothingToMutate);
    }
    let eps = epsilon(space);
    let mut log = Vec::new();
    let mut last = String::from("none");
    for _ in 0..RETRY_CAP {
        let kind = *kinds.choose(rng).expect("non-empty");
        let mut repairs = Vec::new();
        let Some((next, op)) = draw(arch, space, kind, rng, &mut repairs) else {
            last = format!("{kind:?}: no admissible repair");
            log.push(Repair::Redrawn { reason: last.clone() });
            continue;
        };
        let check = validate(&next, space);
        if let Some(v) = check.violations.first() {
            last = v.to_string();
            log.push(Repair::Redrawn { reason: last.clone() });
            continue;
        }
        let d = distance(&next, arch)?;
        if d == 0 || d >= eps {
            last = format!("step distance {d} outside (0, {eps})");
            log.push(Repair::Redrawn { reason: last.clone() });
            continue;
        }
        log.extend(repairs);
        return Ok(Evolved { arch: next, op, repairs: log });
    }
    Err(EvolutionError::RetriesExhausted { attempts: RETRY_CAP, last })
}

pub fn evolve(arch: &Architecture, space: &SearchSpaceDef, seed: u64) -> Result<Evolved, EvolutionError> {
    evolve_with(arch, space, &mut rng::seeded(seed))
}

/// Edges touched by repair, for callers that audit step sizes.
pub fn repaired_edges(repairs: &[Repair]) -> BTreeSet<Edge> {
    repairs
        .iter()
        .filter_map(|r| match r {
            Repair::AddedIncoming { edge, .. } | Repair::AddedOutgoing { edge, .. } => Some(*edge),
            _ => None,
        })
        .collect()
}
