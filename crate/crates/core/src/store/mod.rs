//! Immutable temporal text-attributed graph.
//!
//! Node features live in two tables: a main table with one row per node
//! (history start index, version count, activity periods) and a flat history
//! table holding every feature version, grouped by node and sorted by
//! timestamp within each group. A point-in-time lookup reads the main row and
//! binary-searches the node's history block.
//!
//! Feature lookups are inclusive (`version.timestamp <= t`); edge lookups are
//! strict (`edge.timestamp < t`) so the edge being predicted is never visible.

mod io;

pub use io::{
    load_store, read_jsonl, store_from_lines, write_jsonl, ActivityLine, EdgeLine, FeatureLine, NodeFlags, NodeLine,
    StoreSchemaFile,
};

use crate::error::{Error, Result};
use crate::types::{Direction, NodeRef, NodeType, RelDir, Relation, TimestampedEdge};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityPeriod {
    pub t_start: f64,
    pub t_end: f64,
}

impl ActivityPeriod {
    pub fn new(t_start: f64, t_end: f64) -> Self {
        ActivityPeriod { t_start, t_end }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.t_start <= t && t <= self.t_end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVersion {
    pub timestamp: f64,
    pub numeric_features: Vec<f64>,
    pub text_embedding: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeMainRecord {
    pub history_start: u32,
    pub version_count: u32,
    pub activity: Vec<ActivityPeriod>,
    pub has_text: bool,
}

/// Per-store dimensions and per-type default feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSchema {
    /// d_τ indexed by `NodeType::index()`.
    pub type_feature_dims: [usize; NodeType::COUNT],
    pub text_dim: usize,
    /// Returned when no version precedes the query time. Zeros when absent.
    #[serde(default)]
    pub defaults: Option<[Vec<f64>; NodeType::COUNT]>,
}

impl StoreSchema {
    pub fn new(type_feature_dims: [usize; NodeType::COUNT], text_dim: usize) -> Self {
        StoreSchema {
            type_feature_dims,
            text_dim,
            defaults: None,
        }
    }

    pub fn feature_dim(&self, t: NodeType) -> usize {
        self.type_feature_dims[t.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node: NodeRef,
    pub has_text: bool,
}

/// An edge before sequence numbering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub relation: Relation,
    pub timestamp: f64,
}

/// A resolved version reference: history row and its validity start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VersionRef {
    pub row: u32,
    pub timestamp: f64,
}

/// Features of one node resolved at a query time.
#[derive(Clone, Copy, Debug)]
pub struct Resolved<'g> {
    pub features: &'g [f64],
    pub text: &'g [f64],
    pub feature_version: Option<VersionRef>,
    pub text_version: Option<VersionRef>,
}

#[derive(Debug)]
pub struct TemporalGraph {
    schema: StoreSchema,
    index: HashMap<NodeRef, u32>,
    nodes: Vec<NodeRef>,
    main: Vec<NodeMainRecord>,
    history: Vec<FeatureVersion>,
    /// For each history row, the latest text-bearing row at or before it
    /// within the same node block.
    text_carry: Vec<Option<u32>>,
    edges: Vec<TimestampedEdge>,
    /// CSR offsets over (node slot, RelDir) pairs.
    adj_offsets: Vec<u32>,
    adj_edges: Vec<u32>,
    adj_ts: Vec<f64>,
    defaults: [Vec<f64>; NodeType::COUNT],
    zero_text: Vec<f64>,
    by_type: [Vec<NodeRef>; NodeType::COUNT],
}

/// Build the store. Versions may arrive in any order; duplicates of one
/// (node, timestamp) keep the last supplied. Edge sequence numbers follow
/// input order.
pub fn build_store(
    schema: StoreSchema,
    nodes: Vec<NodeDescriptor>,
    edges: Vec<EdgeRecord>,
    versions: Vec<(NodeRef, FeatureVersion)>,
    activity: Vec<(NodeRef, ActivityPeriod)>,
) -> Result<TemporalGraph> {
    let defaults = match &schema.defaults {
        Some(d) => {
            for t in NodeType::ALL {
                if d[t.index()].len() != schema.feature_dim(t) {
                    return Err(Error::Build(format!(
                        "default features for {t} have length {}, expected d_τ = {}",
                        d[t.index()].len(),
                        schema.feature_dim(t)
                    )));
                }
            }
            d.clone()
        }
        None => NodeType::ALL.map(|t| vec![0.0; schema.feature_dim(t)]),
    };

    let mut index = HashMap::with_capacity(nodes.len());
    let mut refs = Vec::with_capacity(nodes.len());
    let mut has_text = Vec::with_capacity(nodes.len());
    for d in &nodes {
        if index.insert(d.node, refs.len() as u32).is_some() {
            return Err(Error::Build(format!("duplicate node {}", d.node)));
        }
        refs.push(d.node);
        has_text.push(d.has_text);
    }
    let slot = |v: NodeRef| index.get(&v).copied();

    // history: group by node, stable sort by time, last writer wins on ties
    let mut grouped: Vec<Vec<(usize, FeatureVersion)>> = vec![Vec::new(); refs.len()];
    for (seq, (v, ver)) in versions.into_iter().enumerate() {
        let s = slot(v).ok_or_else(|| {
            Error::Build(format!("feature version at t={} for unknown node {v}", ver.timestamp))
        })?;
        let expected = schema.feature_dim(v.node_type);
        if ver.numeric_features.len() != expected {
            return Err(Error::Build(format!(
                "node {v}: numeric features have length {}, expected d_τ = {expected}",
                ver.numeric_features.len()
            )));
        }
        if !ver.timestamp.is_finite() {
            return Err(Error::Build(format!("node {v}: non-finite version timestamp")));
        }
        if let Some(text) = &ver.text_embedding {
            if text.len() != schema.text_dim {
                return Err(Error::Build(format!(
                    "node {v}: text embedding has length {}, expected d_TM = {}",
                    text.len(),
                    schema.text_dim
                )));
            }
            if text.iter().any(|x| !x.is_finite()) {
                return Err(Error::Build(format!("node {v}: non-finite text embedding")));
            }
        }
        grouped[s as usize].push((seq, ver));
    }

    let mut main = Vec::with_capacity(refs.len());
    let mut history = Vec::new();
    let mut text_carry = Vec::new();
    for (s, mut block) in grouped.into_iter().enumerate() {
        block.sort_by(|a, b| a.1.timestamp.total_cmp(&b.1.timestamp).then(a.0.cmp(&b.0)));
        let mut kept: Vec<FeatureVersion> = Vec::with_capacity(block.len());
        for (_, ver) in block {
            match kept.last_mut() {
                Some(last) if last.timestamp == ver.timestamp => *last = ver,
                _ => kept.push(ver),
            }
        }
        let start = history.len() as u32;
        let count = kept.len() as u32;
        let mut carry = None;
        for (i, ver) in kept.into_iter().enumerate() {
            if ver.text_embedding.is_some() {
                carry = Some(start + i as u32);
            }
            text_carry.push(carry);
            history.push(ver);
        }
        main.push(NodeMainRecord {
            history_start: start,
            version_count: count,
            activity: Vec::new(),
            has_text: has_text[s],
        });
    }

    for (v, p) in activity {
        let s = slot(v)
            .ok_or_else(|| Error::Build(format!("activity period for unknown node {v}")))?;
        if !(p.t_start <= p.t_end) {
            return Err(Error::Build(format!(
                "node {v}: activity period ({}, {}) has t_start > t_end",
                p.t_start, p.t_end
            )));
        }
        main[s as usize].activity.push(p);
    }
    for (s, rec) in main.iter_mut().enumerate() {
        rec.activity
            .sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
        for w in rec.activity.windows(2) {
            if w[1].t_start <= w[0].t_end {
                return Err(Error::Build(format!(
                    "node {}: overlapping activity periods ({}, {}) and ({}, {})",
                    refs[s], w[0].t_start, w[0].t_end, w[1].t_start, w[1].t_end
                )));
            }
        }
    }

    let mut timed = Vec::with_capacity(edges.len());
    let mut buckets: Vec<u32> = vec![0; refs.len() * RelDir::COUNT + 1];
    for (seq, e) in edges.iter().enumerate() {
        let (Some(s), Some(d)) = (slot(e.src), slot(e.dst)) else {
            return Err(Error::Build(format!(
                "edge #{seq} ({} -{}-> {} at t={}) has a dangling endpoint",
                e.src, e.relation, e.dst, e.timestamp
            )));
        };
        if !e.timestamp.is_finite() {
            return Err(Error::Build(format!("edge #{seq} has a non-finite timestamp")));
        }
        let fwd = RelDir::new(e.relation, Direction::Forward).index();
        let rev = RelDir::new(e.relation, Direction::Reverse).index();
        buckets[s as usize * RelDir::COUNT + fwd + 1] += 1;
        buckets[d as usize * RelDir::COUNT + rev + 1] += 1;
        timed.push(TimestampedEdge {
            src: e.src,
            dst: e.dst,
            relation: e.relation,
            timestamp: e.timestamp,
            edge_seq: seq as u64,
        });
    }
    for i in 1..buckets.len() {
        buckets[i] += buckets[i - 1];
    }
    let adj_offsets = buckets.clone();
    let mut fill = buckets;
    let mut adj_edges = vec![0u32; adj_offsets[adj_offsets.len() - 1] as usize];
    for (seq, e) in timed.iter().enumerate() {
        let s = slot(e.src).unwrap() as usize;
        let d = slot(e.dst).unwrap() as usize;
        for (n, rd) in [
            (s, RelDir::new(e.relation, Direction::Forward)),
            (d, RelDir::new(e.relation, Direction::Reverse)),
        ] {
            let key = n * RelDir::COUNT + rd.index();
            adj_edges[fill[key] as usize] = seq as u32;
            fill[key] += 1;
        }
    }
    for key in 0..adj_offsets.len() - 1 {
        let (a, b) = (adj_offsets[key] as usize, adj_offsets[key + 1] as usize);
        adj_edges[a..b].sort_by(|&x, &y| {
            let (ex, ey) = (&timed[x as usize], &timed[y as usize]);
            ex.timestamp
                .total_cmp(&ey.timestamp)
                .then(ex.edge_seq.cmp(&ey.edge_seq))
        });
    }
    let adj_ts = adj_edges
        .iter()
        .map(|&e| timed[e as usize].timestamp)
        .collect();

    let mut by_type: [Vec<NodeRef>; NodeType::COUNT] = Default::default();
    for &v in &refs {
        by_type[v.node_type.index()].push(v);
    }
    for list in &mut by_type {
        list.sort();
    }

    Ok(TemporalGraph {
        zero_text: vec![0.0; schema.text_dim],
        schema,
        index,
        nodes: refs,
        main,
        history,
        text_carry,
        edges: timed,
        adj_offsets,
        adj_edges,
        adj_ts,
        defaults,
        by_type,
    })
}

/// Number of elements of `block` with timestamp `<= t`, by binary search.
/// Also returns the number of timestamp comparisons performed.
fn count_at_or_before(block: &[FeatureVersion], t: f64) -> (usize, u32) {
    let (mut lo, mut hi) = (0usize, block.len());
    let mut comparisons = 0;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        comparisons += 1;
        if block[mid].timestamp <= t {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    (lo, comparisons)
}

impl TemporalGraph {
    pub fn schema(&self) -> &StoreSchema {
        &self.schema
    }

    pub fn text_dim(&self) -> usize {
        self.schema.text_dim
    }

    pub fn feature_dim(&self, t: NodeType) -> usize {
        self.schema.feature_dim(t)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, v: NodeRef) -> bool {
        self.index.contains_key(&v)
    }

    /// All nodes of a type, ascending by id.
    pub fn nodes_of_type(&self, t: NodeType) -> &[NodeRef] {
        &self.by_type[t.index()]
    }

    pub fn nodes(&self) -> &[NodeRef] {
        &self.nodes
    }

    pub fn edges(&self) -> &[TimestampedEdge] {
        &self.edges
    }

    pub fn history(&self) -> &[FeatureVersion] {
        &self.history
    }

    fn slot(&self, v: NodeRef) -> Result<usize> {
        self.index
            .get(&v)
            .map(|&s| s as usize)
            .ok_or(Error::UnknownNode(v))
    }

    pub fn main_record(&self, v: NodeRef) -> Result<&NodeMainRecord> {
        Ok(&self.main[self.slot(v)?])
    }

    /// The node's feature versions, ascending by timestamp.
    pub fn versions(&self, v: NodeRef) -> Result<&[FeatureVersion]> {
        let rec = self.main_record(v)?;
        let start = rec.history_start as usize;
        Ok(&self.history[start..start + rec.version_count as usize])
    }

    pub fn activity(&self, v: NodeRef) -> Result<&[ActivityPeriod]> {
        Ok(&self.main_record(v)?.activity)
    }

    pub fn default_features(&self, t: NodeType) -> &[f64] {
        &self.defaults[t.index()]
    }

    pub fn zero_text(&self) -> &[f64] {
        &self.zero_text
    }

    /// Latest version with timestamp `<= t` and the comparison count of the
    /// binary search that located it.
    pub fn locate_version(&self, v: NodeRef, t: f64) -> Result<(Option<VersionRef>, u32)> {
        let rec = self.main_record(v)?;
        let start = rec.history_start as usize;
        let block = &self.history[start..start + rec.version_count as usize];
        let (n, cmp) = count_at_or_before(block, t);
        let found = (n > 0).then(|| VersionRef {
            row: (start + n - 1) as u32,
            timestamp: block[n - 1].timestamp,
        });
        Ok((found, cmp))
    }

    fn newest_version(&self, v: NodeRef) -> Result<Option<VersionRef>> {
        let rec = self.main_record(v)?;
        Ok((rec.version_count > 0).then(|| {
            let row = rec.history_start + rec.version_count - 1;
            VersionRef {
                row,
                timestamp: self.history[row as usize].timestamp,
            }
        }))
    }

    fn text_for(&self, found: Option<VersionRef>) -> Option<VersionRef> {
        let row = self.text_carry[found?.row as usize]?;
        Some(VersionRef {
            row,
            timestamp: self.history[row as usize].timestamp,
        })
    }

    fn resolved_from(&self, v: NodeRef, found: Option<VersionRef>) -> Resolved<'_> {
        let text_version = self.text_for(found);
        Resolved {
            features: match found {
                Some(r) => &self.history[r.row as usize].numeric_features,
                None => self.default_features(v.node_type),
            },
            text: match text_version {
                Some(r) => self.history[r.row as usize]
                    .text_embedding
                    .as_deref()
                    .expect("carry row bears text"),
                None => &self.zero_text,
            },
            feature_version: found,
            text_version,
        }
    }

    /// Numeric features and text embedding as of `t` (inclusive).
    pub fn resolve_at(&self, v: NodeRef, t: f64) -> Result<Resolved<'_>> {
        let (found, _) = self.locate_version(v, t)?;
        Ok(self.resolved_from(v, found))
    }

    /// Features from the newest stored version regardless of time.
    pub fn resolve_newest(&self, v: NodeRef) -> Result<Resolved<'_>> {
        let found = self.newest_version(v)?;
        Ok(self.resolved_from(v, found))
    }

    pub fn features_at(&self, v: NodeRef, t: f64) -> Result<&[f64]> {
        Ok(self.resolve_at(v, t)?.features)
    }

    /// Zero vector for nodes without text or without a text-bearing version
    /// at or before `t`.
    pub fn text_embedding_at(&self, v: NodeRef, t: f64) -> Result<&[f64]> {
        Ok(self.resolve_at(v, t)?.text)
    }

    pub fn is_active(&self, v: NodeRef, t: f64) -> Result<bool> {
        let periods = self.activity(v)?;
        let n = periods.partition_point(|p| p.t_start <= t);
        Ok(n > 0 && t <= periods[n - 1].t_end)
    }

    fn adj_range(&self, slot: usize, rd: RelDir) -> std::ops::Range<usize> {
        let key = slot * RelDir::COUNT + rd.index();
        self.adj_offsets[key] as usize..self.adj_offsets[key + 1] as usize
    }

    /// Up to `limit` edges traversable from `v` along `rd` with timestamp
    /// strictly before `t`, most recent first (ties: higher edge_seq first).
    /// Pass `f64::INFINITY` to see every edge.
    pub fn edges_before_dir(
        &self,
        v: NodeRef,
        rd: RelDir,
        t: f64,
        limit: usize,
    ) -> Result<impl Iterator<Item = &TimestampedEdge> + '_> {
        let range = self.adj_range(self.slot(v)?, rd);
        let ts = &self.adj_ts[range.clone()];
        let n = ts.partition_point(|&x| x < t);
        let ids = &self.adj_edges[range][..n];
        let take = limit.min(n);
        Ok(ids[n - take..]
            .iter()
            .rev()
            .map(move |&e| &self.edges[e as usize]))
    }

    /// Up to `limit` edges incident to `v` (either direction) with relation
    /// `r` and timestamp strictly before `t`, most recent first.
    pub fn edges_before(
        &self,
        v: NodeRef,
        r: Relation,
        t: f64,
        limit: usize,
    ) -> Result<Vec<TimestampedEdge>> {
        if limit == 0 {
            return Err(Error::InvalidArgument("edges_before limit must be >= 1".into()));
        }
        let fwd: Vec<_> = self
            .edges_before_dir(v, RelDir::new(r, Direction::Forward), t, limit)?
            .copied()
            .collect();
        let rev: Vec<_> = self
            .edges_before_dir(v, RelDir::new(r, Direction::Reverse), t, limit)?
            .copied()
            .collect();
        let mut out = Vec::with_capacity(limit.min(fwd.len() + rev.len()));
        let (mut i, mut j) = (0, 0);
        while out.len() < limit && (i < fwd.len() || j < rev.len()) {
            let take_fwd = match (fwd.get(i), rev.get(j)) {
                (Some(a), Some(b)) => (a.timestamp, a.edge_seq) > (b.timestamp, b.edge_seq),
                (Some(_), None) => true,
                _ => false,
            };
            if take_fwd {
                out.push(fwd[i]);
                i += 1;
            } else {
                out.push(rev[j]);
                j += 1;
            }
        }
        Ok(out)
    }

    /// Number of incident edges (any relation, either direction) with
    /// timestamp strictly before `t`.
    pub fn degree_before(&self, v: NodeRef, t: f64) -> Result<usize> {
        let s = self.slot(v)?;
        Ok(RelDir::all()
            .map(|rd| {
                let range = self.adj_range(s, rd);
                self.adj_ts[range].partition_point(|&x| x < t)
            })
            .sum())
    }
}
