//! Point-in-time K-hop heterogeneous subgraph sampling.
//!
//! Expansion is breadth-first. At every frontier node and for every relation
//! in both traversal directions, the `per_relation_limit` most recent edges
//! older than the query time are kept. Nodes are deduplicated at their
//! smallest hop distance and their features are resolved once, at the query
//! time.

use crate::error::{Error, Result};
use crate::store::{TemporalGraph, VersionRef};
use crate::types::{NodeRef, RelDir, TimestampedEdge};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSpec {
    pub hops: u32,
    pub per_relation_limit: usize,
    /// `false` keeps the most recent edges regardless of the query time.
    pub temporal_edges: bool,
    /// `false` resolves every node to its newest stored version.
    pub temporal_features: bool,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            hops: 2,
            per_relation_limit: 10,
            temporal_edges: true,
            temporal_features: true,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hops < 1 {
            return Err(Error::InvalidArgument("sampler hops must be >= 1".into()));
        }
        if self.per_relation_limit < 1 {
            return Err(Error::InvalidArgument(
                "sampler per_relation_limit must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// The same spec with both point-in-time switches on.
    pub fn temporal(self) -> Self {
        SamplerSpec {
            temporal_edges: true,
            temporal_features: true,
            ..self
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampledNode<'g> {
    pub node: NodeRef,
    pub hop: u32,
    pub features: &'g [f64],
    pub text: &'g [f64],
    pub feature_version: Option<VersionRef>,
    pub text_version: Option<VersionRef>,
}

#[derive(Clone, Debug)]
pub struct Subgraph<'g> {
    pub target: NodeRef,
    pub as_of: f64,
    pub per_relation_limit: usize,
    pub nodes: Vec<SampledNode<'g>>,
    pub edges: Vec<TimestampedEdge>,
    local: HashMap<NodeRef, usize>,
    /// Per local node, per RelDir: neighbor local indices, most recent first,
    /// truncated to `per_relation_limit`.
    adjacency: Vec<[Vec<u32>; RelDir::COUNT]>,
}

impl<'g> Subgraph<'g> {
    /// Assemble a subgraph from parts. Edges whose endpoints are not both
    /// included are rejected.
    pub fn from_parts(
        target: NodeRef,
        as_of: f64,
        per_relation_limit: usize,
        nodes: Vec<SampledNode<'g>>,
        edges: Vec<TimestampedEdge>,
    ) -> Result<Self> {
        let mut local = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if local.insert(n.node, i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "node {} appears twice in subgraph",
                    n.node
                )));
            }
        }
        if !local.contains_key(&target) {
            return Err(Error::InvalidArgument(format!(
                "target {target} missing from subgraph"
            )));
        }
        let mut incident: Vec<[Vec<(f64, u64, u32)>; RelDir::COUNT]> =
            (0..nodes.len()).map(|_| Default::default()).collect();
        for e in &edges {
            let (Some(&s), Some(&d)) = (local.get(&e.src), local.get(&e.dst)) else {
                return Err(Error::InvalidArgument(format!(
                    "edge #{} has an endpoint outside the subgraph",
                    e.edge_seq
                )));
            };
            let (_, fwd) = e.traverse_from(e.src).unwrap();
            let (_, rev) = e.traverse_from(e.dst).unwrap();
            incident[s][fwd.index()].push((e.timestamp, e.edge_seq, d as u32));
            incident[d][rev.index()].push((e.timestamp, e.edge_seq, s as u32));
        }
        let adjacency = incident
            .into_iter()
            .map(|per_rel| {
                per_rel.map(|mut list| {
                    list.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
                    list.truncate(per_relation_limit);
                    list.into_iter().map(|(_, _, n)| n).collect()
                })
            })
            .collect();
        Ok(Subgraph {
            target,
            as_of,
            per_relation_limit,
            nodes,
            edges,
            local,
            adjacency,
        })
    }

    pub fn local_index(&self, v: NodeRef) -> Option<usize> {
        self.local.get(&v).copied()
    }

    pub fn target_index(&self) -> usize {
        self.local[&self.target]
    }

    /// Neighbor local indices of local node `i` along `rd`.
    pub fn neighbors_local(&self, i: usize, rd: RelDir) -> &[u32] {
        &self.adjacency[i][rd.index()]
    }

    /// Relation-directions that occur on at least one subgraph edge.
    pub fn relations_present(&self) -> Vec<RelDir> {
        let mut seen = [false; RelDir::COUNT];
        for adj in &self.adjacency {
            for (k, list) in adj.iter().enumerate() {
                seen[k] |= !list.is_empty();
            }
        }
        (0..RelDir::COUNT)
            .filter(|&k| seen[k])
            .map(RelDir::from_index)
            .collect()
    }
}

/// Neighbors of `v` inside the subgraph along `rd`, most recent first,
/// limited to the sampler's per-relation limit.
pub fn neighbors_for_conv(sg: &Subgraph<'_>, v: NodeRef, rd: RelDir) -> Result<Vec<NodeRef>> {
    let i = sg.local_index(v).ok_or_else(|| {
        Error::InvalidArgument(format!("node {v} is not part of the subgraph of {}", sg.target))
    })?;
    Ok(sg
        .neighbors_local(i, rd)
        .iter()
        .map(|&n| sg.nodes[n as usize].node)
        .collect())
}

fn resolve<'g>(
    g: &'g TemporalGraph,
    v: NodeRef,
    hop: u32,
    as_of: f64,
    spec: &SamplerSpec,
) -> Result<SampledNode<'g>> {
    let r = if spec.temporal_features {
        g.resolve_at(v, as_of)?
    } else {
        g.resolve_newest(v)?
    };
    Ok(SampledNode {
        node: v,
        hop,
        features: r.features,
        text: r.text,
        feature_version: r.feature_version,
        text_version: r.text_version,
    })
}

pub fn sample_subgraph<'g>(
    g: &'g TemporalGraph,
    v: NodeRef,
    as_of: f64,
    spec: &SamplerSpec,
) -> Result<Subgraph<'g>> {
    spec.validate()?;
    if !g.contains(v) {
        return Err(Error::UnknownNode(v));
    }
    let cutoff = if spec.temporal_edges {
        as_of
    } else {
        f64::INFINITY
    };
    let mut nodes = vec![resolve(g, v, 0, as_of, spec)?];
    let mut seen: HashSet<NodeRef> = HashSet::from([v]);
    let mut edge_seen: HashSet<u64> = HashSet::new();
    let mut edges = Vec::new();
    let mut frontier = vec![v];
    for hop in 1..=spec.hops {
        let mut next = Vec::new();
        for &u in &frontier {
            for rd in RelDir::all() {
                for e in g.edges_before_dir(u, rd, cutoff, spec.per_relation_limit)? {
                    if edge_seen.insert(e.edge_seq) {
                        edges.push(*e);
                    }
                    let (w, _) = e.traverse_from(u).expect("adjacency edge touches node");
                    if seen.insert(w) {
                        nodes.push(resolve(g, w, hop, as_of, spec)?);
                        next.push(w);
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Subgraph::from_parts(v, as_of, spec.per_relation_limit, nodes, edges)
}
