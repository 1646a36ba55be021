//! JSON Lines ingestion for the four store files plus `schema.json`.
//!
//! | file             | fields                                                          |
//! |------------------|-----------------------------------------------------------------|
//! | `nodes.jsonl`    | `type`, `id`, `flags` (`{"has_text": bool}`)                    |
//! | `edges.jsonl`    | `src_type`, `src_id`, `dst_type`, `dst_id`, `relation`, `timestamp` |
//! | `features.jsonl` | `type`, `id`, `timestamp`, `numeric`, optional `text_embedding`, optional `tokens` |
//! | `activity.jsonl` | `type`, `id`, `t_start`, `t_end`                                |

use super::{
    build_store, ActivityPeriod, EdgeRecord, FeatureVersion, NodeDescriptor, StoreSchema,
    TemporalGraph,
};
use crate::error::{Error, Result};
use crate::types::{NodeRef, NodeType, Relation};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFlags {
    #[serde(default)]
    pub has_text: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLine {
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub id: u32,
    #[serde(default)]
    pub flags: NodeFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeLine {
    pub src_type: NodeType,
    pub src_id: u32,
    pub dst_type: NodeType,
    pub dst_id: u32,
    pub relation: Relation,
    pub timestamp: f64,
}

impl From<&EdgeLine> for EdgeRecord {
    fn from(e: &EdgeLine) -> Self {
        EdgeRecord {
            src: NodeRef::new(e.src_type, e.src_id),
            dst: NodeRef::new(e.dst_type, e.dst_id),
            relation: e.relation,
            timestamp: e.timestamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLine {
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub id: u32,
    pub timestamp: f64,
    pub numeric: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<Vec<f64>>,
    /// Raw token ids of the version's text, before embedding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
}

impl FeatureLine {
    pub fn node(&self) -> NodeRef {
        NodeRef::new(self.node_type, self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityLine {
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub id: u32,
    pub t_start: f64,
    pub t_end: f64,
}

/// `schema.json`: store dimensions keyed by type name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSchemaFile {
    pub feature_dims: std::collections::BTreeMap<NodeType, usize>,
    pub text_dim: usize,
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl StoreSchemaFile {
    pub fn to_schema(&self) -> StoreSchema {
        let dims = NodeType::ALL.map(|t| self.feature_dims.get(&t).copied().unwrap_or(0));
        StoreSchema::new(dims, self.text_dim)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a store from a dataset directory.
pub fn load_store(dir: &Path) -> Result<TemporalGraph> {
    let schema_path = dir.join("schema.json");
    let schema_file: StoreSchemaFile = serde_json::from_reader(BufReader::new(
        File::open(&schema_path).map_err(|e| Error::io(&schema_path, e))?,
    ))?;
    let nodes: Vec<NodeLine> = read_jsonl(&dir.join("nodes.jsonl"))?;
    let edges: Vec<EdgeLine> = read_jsonl(&dir.join("edges.jsonl"))?;
    let features: Vec<FeatureLine> = read_jsonl(&dir.join("features.jsonl"))?;
    let activity: Vec<ActivityLine> = read_jsonl(&dir.join("activity.jsonl"))?;
    store_from_lines(&schema_file, &nodes, &edges, features, &activity)
}

/// Build a store from parsed dataset lines.
pub fn store_from_lines(
    schema_file: &StoreSchemaFile,
    nodes: &[NodeLine],
    edges: &[EdgeLine],
    features: Vec<FeatureLine>,
    activity: &[ActivityLine],
) -> Result<TemporalGraph> {
    build_store(
        schema_file.to_schema(),
        nodes
            .iter()
            .map(|n| NodeDescriptor {
                node: NodeRef::new(n.node_type, n.id),
                has_text: n.flags.has_text,
            })
            .collect(),
        edges.iter().map(EdgeRecord::from).collect(),
        features
            .into_iter()
            .map(|f| {
                (
                    f.node(),
                    FeatureVersion {
                        timestamp: f.timestamp,
                        numeric_features: f.numeric,
                        text_embedding: f.text_embedding,
                    },
                )
            })
            .collect(),
        activity
            .iter()
            .map(|a| {
                (
                    NodeRef::new(a.node_type, a.id),
                    ActivityPeriod::new(a.t_start, a.t_end),
                )
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nodes.jsonl");
        std::fs::write(&p, "{\"type\":\"client\",\"id\":1}\n{\"type\":\"robot\",\"id\":2}\n").unwrap();
        let err = read_jsonl::<NodeLine>(&p).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn edge_line_field_names() {
        let line = EdgeLine {
            src_type: NodeType::Client,
            src_id: 1,
            dst_type: NodeType::JobPost,
            dst_id: 2,
            relation: Relation::Posted,
            timestamp: 3.5,
        };
        let s = serde_json::to_string(&line).unwrap();
        assert_eq!(
            s,
            r#"{"src_type":"client","src_id":1,"dst_type":"job_post","dst_id":2,"relation":"posted","timestamp":3.5}"#
        );
    }
}
