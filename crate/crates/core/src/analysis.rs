//! Accuracy and robustness statistics grouped by block properties.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Architecture, LayerType};
use crate::fitness::ScoredIndividual;

/// A property by which evaluated architectures are grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Property {
    /// Active computational nodes.
    VertexCount,
    EdgeCount,
    /// Active nodes of one layer type.
    LayerTypeCount(LayerType),
}

impl Property {
    pub fn all() -> Vec<Property> {
        let mut v = vec![Property::VertexCount, Property::EdgeCount];
        v.extend(LayerType::ALL.iter().map(|&t| Property::LayerTypeCount(t)));
        v
    }

    pub fn of(self, arch: &Architecture) -> u64 {
        match self {
            Property::VertexCount => arch.active_nodes().len() as u64,
            Property::EdgeCount => arch.block.edges.len() as u64,
            Property::LayerTypeCount(t) => arch
                .active_nodes()
                .into_iter()
                .filter(|&v| arch.block.node(v).is_some_and(|n| n.layer_type == t))
                .count() as u64,
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Property::VertexCount => f.write_str("vertex_count"),
            Property::EdgeCount => f.write_str("edge_count"),
            Property::LayerTypeCount(t) => write!(f, "layer_type_count:{t}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown property {0:?}")]
pub struct UnknownProperty(String);

impl FromStr for Property {
    type Err = UnknownProperty;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vertex_count" => return Ok(Property::VertexCount),
            "edge_count" => return Ok(Property::EdgeCount),
            _ => {}
        }
        s.strip_prefix("layer_type_count:")
            .and_then(|t| LayerType::ALL.into_iter().find(|l| l.as_str() == t))
            .map(Property::LayerTypeCount)
            .ok_or_else(|| UnknownProperty(s.to_string()))
    }
}

impl Serialize for Property {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Property {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One group. Standard deviations divide by the group size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub property: Property,
    pub key: u64,
    pub count: u64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub rob_mean: f64,
    pub rob_std: f64,
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("history contains no scored individuals")]
    EmptyHistory,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Running mean and sum of squared deviations.
#[derive(Default)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn std(&self) -> f64 {
        (self.m2 / self.n as f64).max(0.0).sqrt()
    }
}

/// Groups the scored records of `history` by `property`. Failed
/// evaluations carry no scores and are skipped. Rows are ordered by key.
pub fn group_stats(history: &[ScoredIndividual], property: Property) -> Result<Vec<StatsRow>, AnalysisError> {
    let mut groups: BTreeMap<u64, (Moments, Moments)> = BTreeMap::new();
    for rec in history {
        let Some(s) = rec.scores else { continue };
        let g = groups.entry(property.of(&rec.arch)).or_default();
        g.0.push(s.accuracy_pct);
        g.1.push(s.robustness_pct);
    }
    if groups.is_empty() {
        return Err(AnalysisError::EmptyHistory);
    }
    Ok(groups
        .into_iter()
        .map(|(key, (acc, rob))| StatsRow {
            property,
            key,
            count: acc.n,
            acc_mean: acc.mean,
            acc_std: acc.std(),
            rob_mean: rob.mean,
            rob_std: rob.std(),
        })
        .collect())
}

/// Rows for every property, ordered by (property, key).
pub fn all_stats(history: &[ScoredIndividual]) -> Result<Vec<StatsRow>, AnalysisError> {
    let mut rows = Vec::new();
    for p in Property::all() {
        rows.extend(group_stats(history, p)?);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

fn sort_rows(rows: &mut [StatsRow]) {
    rows.sort_by(|a, b| a.property.to_string().cmp(&b.property.to_string()).then(a.key.cmp(&b.key)));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    /// One JSON object per line.
    JsonLines,
}

pub const CSV_HEADER: [&str; 7] = ["property", "key", "count", "acc_mean", "acc_std", "rob_mean", "rob_std"];

/// Writes rows sorted by (property, key).
pub fn emit_table<W: io::Write>(rows: &[StatsRow], format: TableFormat, out: W) -> Result<(), AnalysisError> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    match format {
        TableFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(CSV_HEADER)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        TableFormat::JsonLines => {
            let mut out = out;
            for r in &rows {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

pub fn parse_csv<R: io::Read>(input: R) -> Result<Vec<StatsRow>, AnalysisError> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<Result<Vec<StatsRow>, _>>()?;
    Ok(rows)
}
