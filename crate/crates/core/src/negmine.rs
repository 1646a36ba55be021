//! Training-set construction: observed matches as positives, text-similar
//! but unmatched nodes as adversarial negatives, and uniform random negatives.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::store::{ActivityPeriod, TemporalGraph};
use crate::types::{NodeRef, NodeType};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchLabel {
    pub query: NodeRef,
    pub positive: NodeRef,
    pub t_start: f64,
    pub t_end: f64,
}

impl MatchLabel {
    pub fn new(query: NodeRef, positive: NodeRef, t_start: f64, t_end: f64) -> Result<Self> {
        if !(t_start <= t_end) {
            return Err(Error::InvalidArgument(format!(
                "label {query}->{positive}: t_start {t_start} > t_end {t_end}"
            )));
        }
        if query.node_type == positive.node_type {
            return Err(Error::InvalidArgument(format!(
                "label {query}->{positive} does not cross sides"
            )));
        }
        Ok(MatchLabel {
            query,
            positive,
            t_start,
            t_end,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegKind {
    Adversarial,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "QuintupleLine", into = "QuintupleLine")]
pub struct TrainingQuintuple {
    pub query: NodeRef,
    pub positive: NodeRef,
    pub t_pos: f64,
    pub negative: NodeRef,
    pub t_neg: f64,
    pub neg_kind: NegKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct QuintupleLine {
    query_type: NodeType,
    query_id: u32,
    pos_type: NodeType,
    pos_id: u32,
    t_pos: f64,
    neg_type: NodeType,
    neg_id: u32,
    t_neg: f64,
    neg_kind: NegKind,
}

impl From<QuintupleLine> for TrainingQuintuple {
    fn from(l: QuintupleLine) -> Self {
        TrainingQuintuple {
            query: NodeRef::new(l.query_type, l.query_id),
            positive: NodeRef::new(l.pos_type, l.pos_id),
            t_pos: l.t_pos,
            negative: NodeRef::new(l.neg_type, l.neg_id),
            t_neg: l.t_neg,
            neg_kind: l.neg_kind,
        }
    }
}

impl From<TrainingQuintuple> for QuintupleLine {
    fn from(q: TrainingQuintuple) -> Self {
        QuintupleLine {
            query_type: q.query.node_type,
            query_id: q.query.node_id,
            pos_type: q.positive.node_type,
            pos_id: q.positive.node_id,
            t_pos: q.t_pos,
            neg_type: q.negative.node_type,
            neg_id: q.negative.node_id,
            t_neg: q.t_neg,
            neg_kind: q.neg_kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningParams {
    pub ann_candidates: usize,
    pub negatives_per_positive: usize,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub rng_seed: u64,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams {
            ann_candidates: 200,
            negatives_per_positive: 20,
            sigma_low: 0.5,
            sigma_high: 0.85,
            rng_seed: 0,
        }
    }
}

impl MiningParams {
    pub fn validate(&self) -> Result<()> {
        if self.ann_candidates == 0 || self.negatives_per_positive == 0 {
            return Err(Error::InvalidArgument(
                "ann_candidates and negatives_per_positive must be positive".into(),
            ));
        }
        if !(0.0 <= self.sigma_low && self.sigma_low < self.sigma_high && self.sigma_high <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "similarity band ({}, {}) must satisfy 0 <= low < high <= 1",
                self.sigma_low, self.sigma_high
            )));
        }
        Ok(())
    }
}

// Independent random streams derived from one seed.
const STREAM_LABEL_TIME: u64 = 1;
const STREAM_CANDIDATE_TIME: u64 = 2;
const STREAM_SUBSAMPLE: u64 = 3;
const STREAM_RANDOM_NEG: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sub_rng(seed: u64, stream: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    rng.set_stream(stream);
    rng
}

fn node_key(v: NodeRef) -> u64 {
    ((v.node_type.index() as u64) << 32) | v.node_id as u64
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Timestamp at which label `index` places its positive pair; shared by the
/// adversarial and random negatives of that label.
pub fn label_time(seed: u64, index: usize, label: &MatchLabel) -> f64 {
    let mut rng = sub_rng(seed, STREAM_LABEL_TIME, &[index as u64]);
    uniform_in(&mut rng, label.t_start, label.t_end)
}

/// Timestamp drawn for candidate `v` of label `index`: a uniformly chosen
/// activity period, then a uniform time inside it.
pub fn candidate_time(seed: u64, index: usize, v: NodeRef, periods: &[ActivityPeriod]) -> f64 {
    let mut rng = sub_rng(seed, STREAM_CANDIDATE_TIME, &[index as u64, node_key(v)]);
    let p = periods[rng.random_range(0..periods.len())];
    uniform_in(&mut rng, p.t_start, p.t_end)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub node: NodeRef,
    pub period: ActivityPeriod,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchKind {
    Exact,
    /// Random-hyperplane trees searched best-first until `search_k` points
    /// have been collected, then re-ranked exactly.
    Forest {
        trees: usize,
        leaf_size: usize,
        search_k: usize,
    },
}

impl SearchKind {
    /// Forest settings that keep top-50 recall above 0.95 on a few thousand
    /// unstructured 64-d vectors.
    pub fn default_forest() -> Self {
        SearchKind::Forest {
            trees: 32,
            leaf_size: 32,
            search_k: 3000,
        }
    }
}

#[derive(Clone, Debug)]
enum TreeNode {
    Leaf(Vec<u32>),
    Split {
        normal: Vec<f64>,
        left: u32,
        right: u32,
    },
}

#[derive(Clone, Debug)]
struct Forest {
    nodes: Vec<TreeNode>,
    roots: Vec<u32>,
    search_k: usize,
}

impl Forest {
    fn build(points: &[Vec<f64>], trees: usize, leaf_size: usize, search_k: usize, seed: u64) -> Self {
        let mut f = Forest {
            nodes: Vec::new(),
            roots: Vec::new(),
            search_k,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit: Vec<Vec<f64>> = points.iter().map(|p| crate::linalg::normalized(p)).collect();
        for _ in 0..trees {
            let all: Vec<u32> = (0..points.len() as u32).collect();
            let root = f.grow(&unit, all, leaf_size.max(1), &mut rng, 0);
            f.roots.push(root);
        }
        f
    }

    fn grow(&mut self, pts: &[Vec<f64>], ids: Vec<u32>, leaf: usize, rng: &mut ChaCha8Rng, depth: usize) -> u32 {
        if ids.len() <= leaf || depth > 64 {
            self.nodes.push(TreeNode::Leaf(ids));
            return self.nodes.len() as u32 - 1;
        }
        // hyperplane bisecting two random members
        let a = &pts[ids[rng.random_range(0..ids.len())] as usize];
        let b = &pts[ids[rng.random_range(0..ids.len())] as usize];
        let normal: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let (mut left, mut right): (Vec<u32>, Vec<u32>) =
            ids.iter().partition(|&&i| dot(&normal, &pts[i as usize]) <= 0.0);
        if left.is_empty() || right.is_empty() {
            // degenerate split: random halves
            let mut all = ids;
            for i in (1..all.len()).rev() {
                all.swap(i, rng.random_range(0..=i));
            }
            right = all.split_off(all.len() / 2);
            left = all;
        }
        let slot = self.nodes.len() as u32;
        self.nodes.push(TreeNode::Leaf(Vec::new()));
        let l = self.grow(pts, left, leaf, rng, depth + 1);
        let r = self.grow(pts, right, leaf, rng, depth + 1);
        self.nodes[slot as usize] = TreeNode::Split {
            normal,
            left: l,
            right: r,
        };
        slot
    }

    fn candidates(&self, q: &[f64], want: usize, n_points: usize) -> Vec<u32> {
        #[derive(PartialEq)]
        struct Item(f64, u32);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                self.0.total_cmp(&o.0).then(o.1.cmp(&self.1))
            }
        }
        let mut heap: BinaryHeap<Item> = self.roots.iter().map(|&r| Item(f64::INFINITY, r)).collect();
        let mut seen = vec![false; n_points];
        let mut out = Vec::new();
        while out.len() < want {
            let Some(Item(prio, id)) = heap.pop() else { break };
            match &self.nodes[id as usize] {
                TreeNode::Leaf(ids) => {
                    for &i in ids {
                        if !seen[i as usize] {
                            seen[i as usize] = true;
                            out.push(i);
                        }
                    }
                }
                TreeNode::Split {
                    normal,
                    left,
                    right,
                } => {
                    let m = dot(normal, q);
                    heap.push(Item(prio.min(-m), *left));
                    heap.push(Item(prio.min(m), *right));
                }
            }
        }
        out
    }
}

/// Active nodes of one type with the embedding used to steer retrieval.
#[derive(Clone, Debug)]
pub struct TypeIndex {
    pub node_type: NodeType,
    pub entries: Vec<IndexEntry>,
    forest: Option<Forest>,
}

impl TypeIndex {
    pub fn new(node_type: NodeType, entries: Vec<IndexEntry>, kind: SearchKind, seed: u64) -> Self {
        let forest = match kind {
            SearchKind::Exact => None,
            SearchKind::Forest {
                trees,
                leaf_size,
                search_k,
            } => {
                let pts: Vec<Vec<f64>> = entries.iter().map(|e| e.embedding.clone()).collect();
                Some(Forest::build(&pts, trees, leaf_size, search_k, seed))
            }
        };
        TypeIndex {
            node_type,
            entries,
            forest,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Up to `k` entry positions with their cosine to `q`, most similar
    /// first, ties by position.
    pub fn search(&self, q: &[f64], k: usize) -> Vec<(usize, f64)> {
        let qn = norm(q);
        let score = |i: usize| {
            let e = &self.entries[i].embedding;
            let en = norm(e);
            if qn == 0.0 || en == 0.0 {
                0.0
            } else {
                dot(q, e) / (qn * en)
            }
        };
        let pool: Vec<usize> = match &self.forest {
            None => (0..self.entries.len()).collect(),
            Some(f) => {
                let want = f.search_k.max(k);
                f.candidates(q, want, self.entries.len())
                    .into_iter()
                    .map(|i| i as usize)
                    .collect()
            }
        };
        let mut scored: Vec<(usize, f64)> = pool.into_iter().map(|i| (i, score(i))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

/// One index per node type over nodes having at least one activity period;
/// each entry embeds the node's latest version within its first period.
pub fn build_type_indices(g: &TemporalGraph, kind: SearchKind, seed: u64) -> Result<Vec<TypeIndex>> {
    NodeType::ALL
        .iter()
        .map(|&t| {
            let mut entries = Vec::new();
            for &v in g.nodes_of_type(t) {
                let periods = g.activity(v)?;
                let Some(&first) = periods.first() else { continue };
                entries.push(IndexEntry {
                    node: v,
                    period: first,
                    embedding: g.text_embedding_at(v, first.t_end)?.to_vec(),
                });
            }
            Ok(TypeIndex::new(t, entries, kind, seed ^ t.index() as u64))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub labels: usize,
    pub adversarial: usize,
    pub random: usize,
    pub skipped_cold_query: usize,
    pub labels_without_survivors: usize,
    pub rejected_below_band: usize,
    pub rejected_above_band: usize,
    pub rejected_positive: usize,
    /// Candidate similarities in 20 equal bins over [-1, 1].
    pub similarity_histogram: Vec<usize>,
}

/// A band survivor before subsampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Survivor {
    pub node: NodeRef,
    pub t_neg: f64,
    pub similarity: f64,
}

fn band_filter(
    g: &TemporalGraph,
    label: &MatchLabel,
    index: usize,
    q: &[f64],
    pool: impl Iterator<Item = NodeRef>,
    params: &MiningParams,
    report: &mut MiningReport,
) -> Result<Vec<Survivor>> {
    let mut out = Vec::new();
    for v in pool {
        if v == label.positive {
            report.rejected_positive += 1;
            continue;
        }
        let periods = g.activity(v)?;
        if periods.is_empty() {
            continue;
        }
        let t = candidate_time(params.rng_seed, index, v, periods);
        let sim = crate::textmatch::cosine_sim(q, g.text_embedding_at(v, t)?)?;
        let bin = (((sim + 1.0) / 2.0 * 20.0).floor() as isize).clamp(0, 19) as usize;
        report.similarity_histogram[bin] += 1;
        if sim <= params.sigma_low {
            report.rejected_below_band += 1;
        } else if sim >= params.sigma_high {
            report.rejected_above_band += 1;
        } else {
            out.push(Survivor {
                node: v,
                t_neg: t,
                similarity: sim,
            });
        }
    }
    Ok(out)
}

/// Band survivors for one label before subsampling, or `None` when the
/// query has no text at its positive timestamp.
pub fn adversarial_pool(
    g: &TemporalGraph,
    indices: &[TypeIndex],
    label: &MatchLabel,
    index: usize,
    params: &MiningParams,
    report: &mut MiningReport,
) -> Result<Option<Vec<Survivor>>> {
    if report.similarity_histogram.len() != 20 {
        report.similarity_histogram = vec![0; 20];
    }
    let t_pos = label_time(params.rng_seed, index, label);
    let q = g.text_embedding_at(label.query, t_pos)?;
    if norm(q) == 0.0 {
        return Ok(None);
    }
    let idx = indices
        .iter()
        .find(|i| i.node_type == label.positive.node_type)
        .ok_or_else(|| Error::Mining(format!("no index for type {}", label.positive.node_type)))?;
    let hits = idx.search(q, params.ann_candidates);
    let pool = hits.into_iter().map(|(i, _)| idx.entries[i].node);
    band_filter(g, label, index, q, pool, params, report).map(Some)
}

/// Adversarial negatives for every label, deterministic in `params.rng_seed`.
pub fn mine_adversarial(
    g: &TemporalGraph,
    indices: &[TypeIndex],
    labels: &[MatchLabel],
    params: &MiningParams,
) -> Result<(Vec<TrainingQuintuple>, MiningReport)> {
    params.validate()?;
    let mut report = MiningReport {
        labels: labels.len(),
        similarity_histogram: vec![0; 20],
        ..Default::default()
    };
    let mut out = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let Some(pool) = adversarial_pool(g, indices, label, i, params, &mut report)? else {
            report.skipped_cold_query += 1;
            continue;
        };
        if pool.is_empty() {
            report.labels_without_survivors += 1;
            continue;
        }
        let t_pos = label_time(params.rng_seed, i, label);
        let n = params.negatives_per_positive.min(pool.len());
        let mut rng = sub_rng(params.rng_seed, STREAM_SUBSAMPLE, &[i as u64]);
        let mut picks = sample(&mut rng, pool.len(), n).into_vec();
        picks.sort_unstable();
        for j in picks {
            let s = pool[j];
            out.push(TrainingQuintuple {
                query: label.query,
                positive: label.positive,
                t_pos,
                negative: s.node,
                t_neg: s.t_neg,
                neg_kind: NegKind::Adversarial,
            });
        }
    }
    report.adversarial = out.len();
    Ok((out, report))
}

/// `count_per_label` uniformly drawn active nodes of the positive's type per
/// label, each at a uniform time inside a uniformly chosen activity period.
pub fn sample_random_negatives(
    g: &TemporalGraph,
    labels: &[MatchLabel],
    count_per_label: usize,
    seed: u64,
) -> Result<Vec<TrainingQuintuple>> {
    let mut pools: Vec<Vec<NodeRef>> = Vec::new();
    for t in NodeType::ALL {
        let mut pool = Vec::new();
        for &v in g.nodes_of_type(t) {
            if !g.activity(v)?.is_empty() {
                pool.push(v);
            }
        }
        pools.push(pool);
    }
    let mut out = Vec::with_capacity(labels.len() * count_per_label);
    for (i, label) in labels.iter().enumerate() {
        let pool = &pools[label.positive.node_type.index()];
        if pool.is_empty() {
            return Err(Error::Mining(format!(
                "no active {} nodes to draw random negatives from",
                label.positive.node_type
            )));
        }
        if pool.len() == 1 && pool[0] == label.positive {
            return Err(Error::Mining(format!(
                "the only active {} node is the positive {}",
                label.positive.node_type, label.positive
            )));
        }
        let t_pos = label_time(seed, i, label);
        let mut rng = sub_rng(seed, STREAM_RANDOM_NEG, &[i as u64]);
        for _ in 0..count_per_label {
            let v = loop {
                let v = pool[rng.random_range(0..pool.len())];
                if v != label.positive {
                    break v;
                }
            };
            let periods = g.activity(v)?;
            let p = periods[rng.random_range(0..periods.len())];
            out.push(TrainingQuintuple {
                query: label.query,
                positive: label.positive,
                t_pos,
                negative: v,
                t_neg: uniform_in(&mut rng, p.t_start, p.t_end),
                neg_kind: NegKind::Random,
            });
        }
    }
    Ok(out)
}
