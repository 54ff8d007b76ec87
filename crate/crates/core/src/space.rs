//! The feasible set of architectures.
//!
//! The search space is the Cartesian product of per-attribute value sets
//! plus the edge-set constraints on the block DAG. Defaults reproduce the
//! ranges used throughout the project; restricted spaces (fewer nodes or
//! fewer values per attribute) are used for brute-force oracle testing.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{
    layer_params, validate, Activation, Architecture, BlockGraph, Edge, InputMode, LayerType, NodeSpec,
    OutputNodeSpec, GLU_PARAM,
};
use crate::rng;

/// Rejection attempts allowed when drawing a random edge set.
pub const SAMPLE_RETRY_CAP: usize = 10_000;

/// Default ceiling on the size of an enumerated space.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpaceDef {
    pub n: usize,
    pub repeats: Vec<u32>,
    pub hidden_widths: Vec<u32>,
    pub layer_types: Vec<LayerType>,
    pub conv_params: Vec<u32>,
    pub sep_conv_params: Vec<u32>,
    pub attn_params: Vec<u32>,
    pub output_widths: Vec<u32>,
    pub input_modes: Vec<InputMode>,
    pub activations: Vec<Activation>,
    /// Defaults to 3.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_min: Option<usize>,
    /// Defaults to `n(n-1)/2 - 3`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_max: Option<usize>,
}

const GLU_PARAMS: [u32; 1] = [GLU_PARAM];

impl Default for SearchSpaceDef {
    fn default() -> Self {
        Self::with_nodes(6)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpaceError {
    #[error("search space needs at least 3 block nodes (got {0})")]
    TooFewNodes(usize),
    #[error("attribute `{0}` has an empty value set; space cardinality is 0")]
    EmptyRange(&'static str),
    #[error("edge bounds [{min}, {max}] are infeasible for n = {n} (at most {limit} edges)")]
    EdgeBounds { min: usize, max: usize, n: usize, limit: usize },
    #[error("no valid edge set found after {0} sampling attempts; check the edge bounds")]
    SamplingExhausted(usize),
    #[error("restricted space has up to {bound} members, above the enumeration cap of {cap}")]
    TooLarge { bound: u128, cap: u64 },
}

impl SearchSpaceDef {
    /// Default attribute ranges with an `n`-vertex block.
    pub fn with_nodes(n: usize) -> Self {
        SearchSpaceDef {
            n,
            repeats: vec![3, 4, 5, 6, 7, 8],
            hidden_widths: vec![128, 256, 512],
            layer_types: LayerType::ALL.to_vec(),
            conv_params: vec![1, 3, 5],
            sep_conv_params: vec![3, 5, 7, 9, 11],
            attn_params: vec![4, 8, 16],
            output_widths: vec![128, 256, 512],
            input_modes: InputMode::ALL.to_vec(),
            activations: Activation::ALL.to_vec(),
            edge_min: None,
            edge_max: None,
        }
    }

    pub fn edge_min(&self) -> usize {
        self.edge_min.unwrap_or(3)
    }

    pub fn edge_max(&self) -> usize {
        self.edge_max.unwrap_or_else(|| (self.n * self.n.saturating_sub(1) / 2).saturating_sub(3))
    }

    pub fn possible_edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push((i, j));
            }
        }
        out
    }

    pub fn params_for(&self, layer_type: LayerType) -> &[u32] {
        match layer_type {
            LayerType::Conv => &self.conv_params,
            LayerType::SepConv => &self.sep_conv_params,
            LayerType::Attn => &self.attn_params,
            LayerType::Glu => &GLU_PARAMS,
        }
    }

    /// Sorts and deduplicates every value set and checks feasibility.
    pub fn normalized(mut self) -> Result<Self, SpaceError> {
        fn tidy<T: Ord>(v: &mut Vec<T>) {
            v.sort();
            v.dedup();
        }
        tidy(&mut self.repeats);
        tidy(&mut self.hidden_widths);
        tidy(&mut self.layer_types);
        tidy(&mut self.conv_params);
        tidy(&mut self.sep_conv_params);
        tidy(&mut self.attn_params);
        tidy(&mut self.output_widths);
        tidy(&mut self.input_modes);
        tidy(&mut self.activations);
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<(), SpaceError> {
        if self.n < 3 {
            return Err(SpaceError::TooFewNodes(self.n));
        }
        let empties: [(&'static str, bool); 6] = [
            ("repeats", self.repeats.is_empty()),
            ("hidden_widths", self.hidden_widths.is_empty()),
            ("layer_types", self.layer_types.is_empty()),
            ("output_widths", self.output_widths.is_empty()),
            ("input_modes", self.input_modes.is_empty()),
            ("activations", self.activations.is_empty()),
        ];
        if let Some((name, _)) = empties.iter().find(|(_, empty)| *empty) {
            return Err(SpaceError::EmptyRange(name));
        }
        for t in &self.layer_types {
            if self.params_for(*t).is_empty() {
                return Err(SpaceError::EmptyRange(match t {
                    LayerType::Conv => "conv_params",
                    LayerType::SepConv => "sep_conv_params",
                    LayerType::Attn => "attn_params",
                    LayerType::Glu => "glu_params",
                }));
            }
        }
        let limit = self.n * (self.n - 1) / 2;
        if self.edge_min() == 0 || self.edge_min() > self.edge_max() || self.edge_max() > limit {
            return Err(SpaceError::EdgeBounds { min: self.edge_min(), max: self.edge_max(), n: self.n, limit });
        }
        Ok(())
    }

    /// Every (layer_type, layer_param) pair the space admits.
    pub fn layer_choices(&self) -> Vec<(LayerType, u32)> {
        self.layer_types
            .iter()
            .flat_map(|&t| self.params_for(t).iter().map(move |&p| (t, p)))
            .collect()
    }

    /// Number of distinct computational-node specs.
    fn node_choices(&self) -> u128 {
        self.layer_choices().len() as u128
            * self.output_widths.len() as u128
            * self.input_modes.len() as u128
            * self.activations.len() as u128
    }
}

pub fn contains(space: &SearchSpaceDef, arch: &Architecture) -> bool {
    validate(arch, space).ok
}

/// The minimum-parameter member: smallest repeats and hidden width, a chain
/// `v0 -> v1 -> v2 -> v(n-1)`, and the cheapest layer at the smallest width
/// on every computational node. Ties go to the lowest layer type and
/// parameter.
pub fn simplest(space: &SearchSpaceDef) -> Architecture {
    let width = space.output_widths.iter().copied().min().unwrap_or(128);
    let w = u64::from(width);
    let (layer_type, layer_param) = space
        .layer_choices()
        .into_iter()
        .min_by_key(|&(t, p)| (layer_params(t, p, w, w).unwrap_or(u64::MAX), t, p))
        .unwrap_or((LayerType::Conv, 1));
    let input_mode = if space.input_modes.contains(&InputMode::Add) {
        InputMode::Add
    } else {
        space.input_modes.iter().copied().min().unwrap_or(InputMode::Add)
    };
    let activation = if space.activations.contains(&Activation::None) {
        Activation::None
    } else {
        space.activations.iter().copied().min().unwrap_or(Activation::None)
    };
    let n = space.n;
    let node = NodeSpec { layer_type, layer_param, output_width: width, input_mode, activation };

    let mut edges: BTreeSet<Edge> = BTreeSet::new();
    let chain: Vec<usize> = match n {
        0..=2 => vec![],
        3 => vec![0, 1, 2],
        _ => vec![0, 1, 2, n - 1],
    };
    for w in chain.windows(2) {
        edges.insert((w[0], w[1]));
    }
    // Spaces demanding more edges get them from v0 into the highest
    // computational vertices, which stay inactive and cost nothing.
    let mut extra = (3..n.saturating_sub(1)).rev().map(|v| (0, v)).chain(space.possible_edges());
    while edges.len() < space.edge_min() {
        match extra.next() {
            Some(e) => {
                edges.insert(e);
            }
            None => break,
        }
    }

    Architecture {
        repeats: space.repeats.iter().copied().min().unwrap_or(3),
        hidden_width: space.hidden_widths.iter().copied().min().unwrap_or(128),
        block: BlockGraph {
            n,
            nodes: vec![node; n.saturating_sub(2)],
            output_node: OutputNodeSpec { input_mode, activation },
            edges,
        },
    }
}

fn pick<T: Copy, R: Rng + ?Sized>(values: &[T], rng: &mut R) -> T {
    *values.choose(rng).expect("value sets are non-empty")
}

pub fn random_node<R: Rng + ?Sized>(space: &SearchSpaceDef, rng: &mut R) -> NodeSpec {
    let layer_type = pick(&space.layer_types, rng);
    NodeSpec {
        layer_type,
        layer_param: pick(space.params_for(layer_type), rng),
        output_width: pick(&space.output_widths, rng),
        input_mode: pick(&space.input_modes, rng),
        activation: pick(&space.activations, rng),
    }
}

/// Attribute-uniform random member. Each attribute is drawn uniformly from
/// its range; the edge set includes each forward edge with probability 1/2
/// and is redrawn until it satisfies the edge bounds and connectivity.
pub fn sample_with<R: Rng + ?Sized>(space: &SearchSpaceDef, rng: &mut R) -> Result<Architecture, SpaceError> {
    space.check()?;
    let repeats = pick(&space.repeats, rng);
    let hidden_width = pick(&space.hidden_widths, rng);
    let nodes: Vec<NodeSpec> = (0..space.n - 2).map(|_| random_node(space, rng)).collect();
    let output_node = OutputNodeSpec { input_mode: pick(&space.input_modes, rng), activation: pick(&space.activations, rng) };
    let all = space.possible_edges();
    for _ in 0..SAMPLE_RETRY_CAP {
        let edges: BTreeSet<Edge> = all.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        if edges.len() < space.edge_min() || edges.len() > space.edge_max() {
            continue;
        }
        let arch = Architecture {
            repeats,
            hidden_width,
            block: BlockGraph { n: space.n, nodes: nodes.clone(), output_node, edges },
        };
        if arch.block.has_io_path() && contains(space, &arch) {
            return Ok(arch);
        }
    }
    Err(SpaceError::SamplingExhausted(SAMPLE_RETRY_CAP))
}

pub fn sample(space: &SearchSpaceDef, seed: u64) -> Result<Architecture, SpaceError> {
    sample_with(space, &mut rng::seeded(seed))
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Upper bound on the number of members of `space` (edge sets counted
/// without the connectivity filter).
pub fn cardinality_bound(space: &SearchSpaceDef) -> u128 {
    let m = space.possible_edges().len() as u128;
    let edge_sets: u128 = (space.edge_min()..=space.edge_max().min(m as usize))
        .map(|k| binomial(m, k as u128))
        .sum();
    let node = space.node_choices();
    let mut bound = space.repeats.len() as u128 * space.hidden_widths.len() as u128;
    for _ in 0..space.n.saturating_sub(2) {
        bound = bound.saturating_mul(node);
    }
    bound
        .saturating_mul(space.input_modes.len() as u128 * space.activations.len() as u128)
        .saturating_mul(edge_sets)
}

/// Lazily yields every member of a restricted space exactly once.
pub struct Enumeration {
    repeats: Vec<u32>,
    widths: Vec<u32>,
    nodes: Vec<NodeSpec>,
    outputs: Vec<OutputNodeSpec>,
    edge_sets: Vec<BTreeSet<Edge>>,
    n: usize,
    /// Mixed-radix counter: [repeats, width, node_1..node_{n-2}, output, edges].
    digits: Vec<usize>,
    radices: Vec<usize>,
    done: bool,
    space: SearchSpaceDef,
}

impl Iterator for Enumeration {
    type Item = Architecture;

    fn next(&mut self) -> Option<Architecture> {
        loop {
            if self.done {
                return None;
            }
            let d = &self.digits;
            let k = self.n - 2;
            let arch = Architecture {
                repeats: self.repeats[d[0]],
                hidden_width: self.widths[d[1]],
                block: BlockGraph {
                    n: self.n,
                    nodes: (0..k).map(|i| self.nodes[d[2 + i]]).collect(),
                    output_node: self.outputs[d[2 + k]],
                    edges: self.edge_sets[d[3 + k]].clone(),
                },
            };
            // advance
            let mut pos = self.digits.len();
            loop {
                if pos == 0 {
                    self.done = true;
                    break;
                }
                pos -= 1;
                self.digits[pos] += 1;
                if self.digits[pos] < self.radices[pos] {
                    break;
                }
                self.digits[pos] = 0;
            }
            // Node specs are drawn from the space so only head divisibility
            // can still fail.
            if contains(&self.space, &arch) {
                return Some(arch);
            }
        }
    }
}

/// Enumerates a restricted space, refusing spaces whose cardinality bound
/// exceeds `cap`.
pub fn enumerate_restricted(space: &SearchSpaceDef, cap: u64) -> Result<Enumeration, SpaceError> {
    space.check()?;
    let bound = cardinality_bound(space);
    if bound > u128::from(cap) {
        return Err(SpaceError::TooLarge { bound, cap });
    }
    let mut nodes = Vec::new();
    for (layer_type, layer_param) in space.layer_choices() {
        for &output_width in &space.output_widths {
            for &input_mode in &space.input_modes {
                for &activation in &space.activations {
                    nodes.push(NodeSpec { layer_type, layer_param, output_width, input_mode, activation });
                }
            }
        }
    }
    let mut outputs = Vec::new();
    for &input_mode in &space.input_modes {
        for &activation in &space.activations {
            outputs.push(OutputNodeSpec { input_mode, activation });
        }
    }
    let all = space.possible_edges();
    let mut edge_sets = Vec::new();
    for mask in 0u64..(1u64 << all.len()) {
        let count = mask.count_ones() as usize;
        if count < space.edge_min() || count > space.edge_max() {
            continue;
        }
        let edges: BTreeSet<Edge> = all.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, e)| *e).collect();
        let probe = BlockGraph {
            n: space.n,
            nodes: Vec::new(),
            output_node: OutputNodeSpec { input_mode: InputMode::Add, activation: Activation::None },
            edges,
        };
        if probe.has_io_path() {
            edge_sets.push(probe.edges);
        }
    }
    let k = space.n - 2;
    let mut radices = vec![space.repeats.len(), space.hidden_widths.len()];
    radices.extend(std::iter::repeat_n(nodes.len(), k));
    radices.push(outputs.len());
    radices.push(edge_sets.len());
    let done = radices.contains(&0);
    Ok(Enumeration {
        repeats: space.repeats.clone(),
        widths: space.hidden_widths.clone(),
        nodes,
        outputs,
        edge_sets,
        n: space.n,
        digits: vec![0; radices.len()],
        radices,
        done,
        space: space.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{count_params, ModelShapeConfig};

    #[test]
    fn default_ranges() {
        let s = SearchSpaceDef::default();
        assert_eq!(s.n, 6);
        assert_eq!(s.repeats, vec![3, 4, 5, 6, 7, 8]);
        assert_eq!(s.edge_min(), 3);
        assert_eq!(s.edge_max(), 12);
        assert_eq!(s.clone().normalized().unwrap(), s);
    }

    #[test]
    fn simplest_default() {
        let s = SearchSpaceDef::default();
        let a = simplest(&s);
        assert_eq!(a.repeats, 3);
        assert_eq!(a.hidden_width, 128);
        assert_eq!(a.block.edges, [(0, 1), (1, 2), (2, 5)].into());
        for v in a.active_nodes() {
            assert_eq!(*a.block.node(v).unwrap(), NodeSpec::linear(128));
        }
        assert!(contains(&s, &a));
    }

    #[test]
    fn simplest_is_minimal_among_chain_variants() {
        // Exhaustive over both active chain nodes' attributes.
        let s = SearchSpaceDef::default();
        let shape = ModelShapeConfig::default();
        let base = simplest(&s);
        let best = count_params(&base, &shape).unwrap().total;
        let choices: Vec<NodeSpec> = enumerate_nodes(&s);
        for a in &choices {
            for b in &choices {
                let mut arch = base.clone();
                arch.block.nodes[0] = *a;
                arch.block.nodes[1] = *b;
                if !contains(&s, &arch) {
                    continue;
                }
                let c = count_params(&arch, &shape).unwrap().total;
                assert!(c >= best);
            }
        }
    }

    fn enumerate_nodes(s: &SearchSpaceDef) -> Vec<NodeSpec> {
        let mut out = Vec::new();
        for (t, p) in s.layer_choices() {
            for &w in &s.output_widths {
                for &m in &s.input_modes {
                    for &act in &s.activations {
                        out.push(NodeSpec { layer_type: t, layer_param: p, output_width: w, input_mode: m, activation: act });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sepconv_param_13_rejected() {
        let s = SearchSpaceDef::default();
        let mut a = simplest(&s);
        a.block.nodes[0].layer_type = LayerType::SepConv;
        a.block.nodes[0].layer_param = 13;
        assert!(!contains(&s, &a));
        a.block.nodes[0].layer_param = 11;
        assert!(contains(&s, &a));
    }

    #[test]
    fn thirteen_edges_rejected() {
        let s = SearchSpaceDef::default();
        let mut a = simplest(&s);
        a.block.edges = s.possible_edges().into_iter().take(13).collect();
        assert_eq!(a.block.edges.len(), 13);
        assert!(!contains(&s, &a));
        a.block.edges = s.possible_edges().into_iter().take(12).collect();
        assert!(contains(&s, &a));
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = SearchSpaceDef::default();
        assert_eq!(sample(&s, 42).unwrap(), sample(&s, 42).unwrap());
    }

    #[test]
    fn small_enumeration_count() {
        // n = 4, one node choice, one repeat, one width: 3-edge subsets of the
        // 6 forward edges that contain a v0 -> v3 path.
        let s = SearchSpaceDef {
            repeats: vec![3],
            hidden_widths: vec![128],
            layer_types: vec![LayerType::Conv],
            conv_params: vec![1],
            output_widths: vec![128],
            input_modes: vec![InputMode::Add],
            activations: vec![Activation::None],
            ..SearchSpaceDef::with_nodes(4)
        };
        let all: Vec<_> = enumerate_restricted(&s, DEFAULT_ENUMERATION_CAP).unwrap().collect();
        let mut expected = 0;
        let edges = s.possible_edges();
        for a in 0..6 {
            for b in a + 1..6 {
                for c in b + 1..6 {
                    let set = [edges[a], edges[b], edges[c]];
                    let reach = |set: &[Edge]| {
                        let mut r = [true, false, false, false];
                        for v in 1..4 {
                            r[v] = set.iter().any(|&(i, j)| j == v && r[i]);
                        }
                        r[3]
                    };
                    if reach(&set) {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(all.len(), expected);
        // By hand: the 10 subsets holding (0,3), plus 7 without it that
        // contain 0-1-3, 0-2-3 or 0-1-2-3.
        assert_eq!(expected, 17);
    }

    #[test]
    fn empty_attribute_is_refused() {
        let s = SearchSpaceDef { activations: vec![], ..SearchSpaceDef::with_nodes(4) };
        let err = enumerate_restricted(&s, DEFAULT_ENUMERATION_CAP).err().unwrap();
        assert_eq!(err, SpaceError::EmptyRange("activations"));
        assert!(err.to_string().contains("cardinality is 0"));
    }

    #[test]
    fn oversized_space_is_refused_with_bound() {
        let err = enumerate_restricted(&SearchSpaceDef::default(), DEFAULT_ENUMERATION_CAP).err().unwrap();
        match err {
            SpaceError::TooLarge { bound, cap } => {
                assert!(bound > u128::from(cap));
            }
            other => panic!("{other:?}"),
        }
    }
}
