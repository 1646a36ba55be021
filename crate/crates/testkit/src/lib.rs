//! Slow, direct reference implementations for checking the optimized code.
//!
//! Nothing here shares code paths with the library beyond its plain data
//! types: lookups are linear scans, sampling re-scans every edge, sums are
//! compensated.

use graphmatch_core::autodiff::ParamSet;
use graphmatch_core::model::{ConvKind, GraphMatchModel};
use graphmatch_core::negmine::{candidate_time, label_time, MatchLabel, MiningParams};
use graphmatch_core::sampler::SamplerSpec;
use graphmatch_core::store::{
    build_store, ActivityPeriod, EdgeRecord, FeatureVersion, NodeDescriptor, StoreSchema, TemporalGraph,
};
use graphmatch_core::types::{Direction, NodeRef, NodeType, RelDir, Relation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// Everything a store is built from, kept in input order.
#[derive(Clone, Debug)]
pub struct RawGraph {
    pub feature_dims: [usize; 3],
    pub text_dim: usize,
    pub nodes: Vec<NodeDescriptor>,
    pub edges: Vec<EdgeRecord>,
    pub versions: Vec<(NodeRef, FeatureVersion)>,
    pub activity: Vec<(NodeRef, ActivityPeriod)>,
}

/// See [`RawGraph::edge_groups`].
#[derive(Clone, Debug, Default)]
pub struct EdgeGroups {
    by_node: HashMap<NodeRef, Vec<usize>>,
}

#[derive(Clone, Copy, Debug)]
pub struct RawSizes {
    pub freelancers: u32,
    pub clients: u32,
    pub job_posts: u32,
    pub edges: usize,
    pub max_versions: usize,
    /// Timestamps are drawn as integers below this, so ties are common.
    pub horizon: u32,
}

impl Default for RawSizes {
    fn default() -> Self {
        RawSizes {
            freelancers: 30,
            clients: 8,
            job_posts: 40,
            edges: 300,
            max_versions: 5,
            horizon: 100,
        }
    }
}

/// Endpoint types of each relation.
pub fn endpoints(r: Relation) -> (NodeType, NodeType) {
    match r {
        Relation::Posted => (NodeType::Client, NodeType::JobPost),
        Relation::Applied => (NodeType::Freelancer, NodeType::JobPost),
        Relation::Invited | Relation::Interviewed | Relation::Hired => (NodeType::JobPost, NodeType::Freelancer),
    }
}

impl RawGraph {
    pub fn random(seed: u64, sizes: RawSizes, feature_dims: [usize; 3], text_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = |t: NodeType| match t {
            NodeType::Freelancer => sizes.freelancers,
            NodeType::Client => sizes.clients,
            NodeType::JobPost => sizes.job_posts,
        };
        let mut nodes = Vec::new();
        for t in NodeType::ALL {
            for i in 0..count(t) {
                nodes.push(NodeDescriptor {
                    node: NodeRef::new(t, i),
                    has_text: t != NodeType::Client,
                });
            }
        }
        let ts = |rng: &mut ChaCha8Rng| rng.random_range(0..sizes.horizon) as f64;
        let mut versions = Vec::new();
        for n in &nodes {
            for _ in 0..rng.random_range(0..=sizes.max_versions) {
                let text = (n.has_text && rng.random_bool(0.7))
                    .then(|| (0..text_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
                versions.push((
                    n.node,
                    FeatureVersion {
                        timestamp: ts(&mut rng),
                        numeric_features: (0..feature_dims[n.node.node_type.index()])
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect(),
                        text_embedding: text,
                    },
                ));
            }
        }
        let mut edges = Vec::new();
        for _ in 0..sizes.edges {
            let r = Relation::ALL[rng.random_range(0..Relation::COUNT)];
            let (a, b) = endpoints(r);
            if count(a) == 0 || count(b) == 0 {
                continue;
            }
            edges.push(EdgeRecord {
                src: NodeRef::new(a, rng.random_range(0..count(a))),
                dst: NodeRef::new(b, rng.random_range(0..count(b))),
                relation: r,
                timestamp: ts(&mut rng),
            });
        }
        let mut activity = Vec::new();
        for n in &nodes {
            if n.node.node_type == NodeType::Client {
                continue;
            }
            let mut t = rng.random_range(0.0..sizes.horizon as f64 / 2.0);
            for _ in 0..rng.random_range(1..=2) {
                let end = t + rng.random_range(0.0..sizes.horizon as f64 / 3.0);
                activity.push((n.node, ActivityPeriod::new(t, end)));
                t = end + 1.0;
            }
        }
        RawGraph {
            feature_dims,
            text_dim,
            nodes,
            edges,
            versions,
            activity,
        }
    }

    pub fn build(&self) -> TemporalGraph {
        build_store(
            StoreSchema::new(self.feature_dims, self.text_dim),
            self.nodes.clone(),
            self.edges.clone(),
            self.versions.clone(),
            self.activity.clone(),
        )
        .expect("raw graph builds")
    }

    /// Versions of `v` with duplicate timestamps resolved to the last
    /// supplied, keyed by timestamp bits in ascending time order.
    fn resolved_versions(&self, v: NodeRef) -> Vec<&FeatureVersion> {
        let mut by_time: Vec<&FeatureVersion> = Vec::new();
        for (n, ver) in &self.versions {
            if *n != v {
                continue;
            }
            match by_time.iter().position(|x| x.timestamp == ver.timestamp) {
                Some(i) => by_time[i] = ver,
                None => by_time.push(ver),
            }
        }
        by_time.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        by_time
    }

    fn version_at(&self, v: NodeRef, t: f64) -> Option<&FeatureVersion> {
        let mut best: Option<&FeatureVersion> = None;
        for ver in self.resolved_versions(v) {
            if ver.timestamp <= t && best.is_none_or(|b| ver.timestamp >= b.timestamp) {
                best = Some(ver);
            }
        }
        best
    }

    pub fn newest_time(&self, v: NodeRef) -> f64 {
        self.resolved_versions(v)
            .last()
            .map(|x| x.timestamp)
            .unwrap_or(f64::NEG_INFINITY)
    }

    pub fn features_at(&self, v: NodeRef, t: f64) -> Vec<f64> {
        match self.version_at(v, t) {
            Some(ver) => ver.numeric_features.clone(),
            None => vec![0.0; self.feature_dims[v.node_type.index()]],
        }
    }

    /// Text of the newest version at or before `t` that carries text.
    pub fn text_at(&self, v: NodeRef, t: f64) -> Vec<f64> {
        let mut best: Option<&FeatureVersion> = None;
        for ver in self.resolved_versions(v) {
            if ver.timestamp <= t && ver.text_embedding.is_some() && best.is_none_or(|b| ver.timestamp >= b.timestamp) {
                best = Some(ver);
            }
        }
        best.and_then(|b| b.text_embedding.clone())
            .unwrap_or_else(|| vec![0.0; self.text_dim])
    }

    /// Edges leaving `v` along `rd` strictly before `t`, most recent first
    /// (ties: later input first), at most `limit`. Returns input indices.
    pub fn edges_before(&self, v: NodeRef, rd: RelDir, t: f64, limit: usize) -> Vec<usize> {
        self.edges_before_among(0..self.edges.len(), v, rd, t, limit)
    }

    fn edges_before_among(
        &self,
        ids: impl Iterator<Item = usize>,
        v: NodeRef,
        rd: RelDir,
        t: f64,
        limit: usize,
    ) -> Vec<usize> {
        let mut hits: Vec<usize> = ids
            .filter(|&i| {
                let e = &self.edges[i];
                let end = match rd.direction {
                    Direction::Forward => e.src,
                    Direction::Reverse => e.dst,
                };
                e.relation == rd.relation && end == v && e.timestamp < t
            })
            .collect();
        hits.sort_by(|&a, &b| {
            self.edges[b]
                .timestamp
                .total_cmp(&self.edges[a].timestamp)
                .then(b.cmp(&a))
        });
        hits.truncate(limit);
        hits
    }

    /// Edge ids touching each node, for scan-free reference sampling on
    /// large graphs. Stale once `edges` changes.
    pub fn edge_groups(&self) -> EdgeGroups {
        let mut by_node: HashMap<NodeRef, Vec<usize>> = HashMap::new();
        for (i, e) in self.edges.iter().enumerate() {
            by_node.entry(e.src).or_default().push(i);
            if e.dst != e.src {
                by_node.entry(e.dst).or_default().push(i);
            }
        }
        EdgeGroups { by_node }
    }

    fn other_end(&self, i: usize, v: NodeRef) -> NodeRef {
        let e = &self.edges[i];
        if e.src == v {
            e.dst
        } else {
            e.src
        }
    }

    /// Breadth-first reference sampler: node -> hop, and edge indices.
    pub fn sample(&self, target: NodeRef, t: f64, spec: &SamplerSpec) -> (BTreeMap<NodeRef, u32>, BTreeSet<usize>) {
        self.sample_with(None, target, t, spec)
    }

    /// The reference sampler reading candidate edges from `groups`.
    pub fn sample_grouped(
        &self,
        groups: &EdgeGroups,
        target: NodeRef,
        t: f64,
        spec: &SamplerSpec,
    ) -> (BTreeMap<NodeRef, u32>, BTreeSet<usize>) {
        self.sample_with(Some(groups), target, t, spec)
    }

    fn sample_with(
        &self,
        groups: Option<&EdgeGroups>,
        target: NodeRef,
        t: f64,
        spec: &SamplerSpec,
    ) -> (BTreeMap<NodeRef, u32>, BTreeSet<usize>) {
        let lookup = |u: NodeRef, rd: RelDir, cutoff: f64| match groups {
            None => self.edges_before(u, rd, cutoff, spec.per_relation_limit),
            Some(gr) => {
                let ids = gr.by_node.get(&u).map(|v| v.as_slice()).unwrap_or(&[]);
                self.edges_before_among(ids.iter().copied(), u, rd, cutoff, spec.per_relation_limit)
            }
        };
        let cutoff = if spec.temporal_edges { t } else { f64::INFINITY };
        let mut hops = BTreeMap::from([(target, 0u32)]);
        let mut edges = BTreeSet::new();
        let mut frontier = BTreeSet::from([target]);
        for hop in 1..=spec.hops {
            let mut next = BTreeSet::new();
            for &u in &frontier {
                for rd in RelDir::all() {
                    for i in lookup(u, rd, cutoff) {
                        edges.insert(i);
                        let w = self.other_end(i, u);
                        if !hops.contains_key(&w) {
                            next.insert(w);
                        }
                    }
                }
            }
            for &w in &next {
                hops.insert(w, hop);
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        (hops, edges)
    }

    /// Reference embedding: every subgraph node through every layer, with
    /// explicit loops.
    pub fn embed(&self, model: &GraphMatchModel, target: NodeRef, t: f64) -> Vec<f64> {
        let spec = model.config.sampler.temporal();
        let cfg = &model.config;
        let p = Params(&model.params);
        let (hops, edge_set) = self.sample(target, t, &spec);
        let nodes: Vec<NodeRef> = hops.keys().copied().collect();
        let local: BTreeMap<NodeRef, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        // per node, per reldir: neighbors most recent first, truncated
        let mut adj: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); RelDir::COUNT]; nodes.len()];
        for (i, &v) in nodes.iter().enumerate() {
            for rd in RelDir::all() {
                let mut inc: Vec<usize> = edge_set
                    .iter()
                    .copied()
                    .filter(|&e| {
                        let ed = &self.edges[e];
                        ed.relation == rd.relation
                            && match rd.direction {
                                Direction::Forward => ed.src == v,
                                Direction::Reverse => ed.dst == v,
                            }
                    })
                    .collect();
                inc.sort_by(|&a, &b| self.edges[b].timestamp.total_cmp(&self.edges[a].timestamp).then(b.cmp(&a)));
                inc.truncate(spec.per_relation_limit);
                adj[i][rd.index()] = inc.iter().map(|&e| local[&self.other_end(e, v)]).collect();
            }
        }
        let text = |v: NodeRef| {
            if cfg.use_text {
                self.text_at(v, t)
            } else {
                vec![0.0; self.text_dim]
            }
        };
        let mut h: Vec<Vec<f64>> = nodes
            .iter()
            .map(|&v| {
                let mut x = text(v);
                let f = self.features_at(v, t);
                if cfg.use_features {
                    x.extend(f);
                } else {
                    x.extend(vec![0.0; f.len()]);
                }
                let ty = v.node_type;
                let a = relu(add(&p.mv(&format!("enc.{ty}.w1"), &x), p.vec(&format!("enc.{ty}.b1"))));
                relu(add(&p.mv(&format!("enc.{ty}.w2"), &a), p.vec(&format!("enc.{ty}.b2"))))
            })
            .collect();
        for l in 0..cfg.layers {
            let mut next = Vec::with_capacity(h.len());
            for i in 0..nodes.len() {
                let mut rel_terms: Vec<Vec<f64>> = Vec::new();
                for rd in RelDir::all() {
                    let nb = &adj[i][rd.index()];
                    if nb.is_empty() {
                        continue;
                    }
                    let w = format!("conv.{l}.{rd}.w");
                    let keys: Vec<Vec<f64>> = nb.iter().map(|&u| p.mv(&w, &h[u])).collect();
                    let agg = match cfg.conv_kind {
                        ConvKind::Mean => mean(&keys),
                        ConvKind::Attention => {
                            let q = p.mv(&format!("conv.{l}.{rd}.q"), &h[i]);
                            let a = p.vec(&format!("conv.{l}.{rd}.a"));
                            let scores: Vec<f64> = keys
                                .iter()
                                .map(|k| {
                                    (0..q.len())
                                        .map(|j| {
                                            let z = q[j] + k[j];
                                            a[j] * if z > 0.0 { z } else { cfg.leaky_slope * z }
                                        })
                                        .sum()
                                })
                                .collect();
                            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                            let z: f64 = e.iter().sum();
                            let mut y = vec![0.0; q.len()];
                            for (k, w) in keys.iter().zip(&e) {
                                for j in 0..y.len() {
                                    y[j] += w / z * k[j];
                                }
                            }
                            y
                        }
                    };
                    rel_terms.push(add(&agg, p.vec(&format!("conv.{l}.{rd}.b"))));
                }
                let mut pre = add(&p.mv(&format!("conv.{l}.root.w"), &h[i]), p.vec(&format!("conv.{l}.root.b")));
                if !rel_terms.is_empty() {
                    pre = add(&pre, &mean(&rel_terms));
                }
                next.push(relu(pre));
            }
            h = next;
        }
        let ti = local[&target];
        let out = add(&p.mv("out.w", &h[ti]), p.vec("out.b"));
        let x = text(target);
        let hidden = relu(add(&p.mv("proj.w1", &x), p.vec("proj.b1")));
        let proj = add(&p.mv("proj.w2", &hidden), p.vec("proj.b2"));
        let sum = add(&out, &proj);
        let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            let pn = proj.iter().map(|x| x * x).sum::<f64>().sqrt();
            return proj.iter().map(|x| x / pn).collect();
        }
        sum.iter().map(|x| x / n).collect()
    }
}

struct Params<'a>(&'a ParamSet);

impl Params<'_> {
    fn find(&self, name: &str) -> &graphmatch_core::autodiff::Tensor {
        let id = self
            .0
            .ids()
            .find(|&id| self.0.name(id) == name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        self.0.get(id)
    }

    fn mv(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let t = self.find(name);
        assert_eq!(t.cols, x.len(), "{name}");
        (0..t.rows)
            .map(|r| (0..t.cols).map(|c| t.data[r * t.cols + c] * x[c]).sum())
            .collect()
    }

    fn vec(&self, name: &str) -> &[f64] {
        &self.find(name).data
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn relu(a: Vec<f64>) -> Vec<f64> {
    a.into_iter().map(|x| x.max(0.0)).collect()
}

fn mean(xs: &[Vec<f64>]) -> Vec<f64> {
    let mut y = vec![0.0; xs[0].len()];
    for x in xs {
        for (a, b) in y.iter_mut().zip(x) {
            *a += b;
        }
    }
    y.iter().map(|v| v / xs.len() as f64).collect()
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Cosine similarity with compensated dot products; 0 for a zero vector.
pub fn reference_cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = compensated_sum(a.iter().zip(b).map(|(x, y)| x * y));
    let na = compensated_sum(a.iter().map(|x| x * x)).sqrt();
    let nb = compensated_sum(b.iter().map(|x| x * x)).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

/// Mean over queries of `-log softmax(cos / tau)[positive]`.
pub fn reference_infonce(queries: &[Vec<f64>], candidates: &[Vec<f64>], positive: &[usize], tau: f64) -> f64 {
    let per_query = queries.iter().zip(positive).map(|(q, &p)| {
        let logits: Vec<f64> = candidates.iter().map(|c| reference_cosine(q, c) / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + compensated_sum(logits.iter().map(|l| (l - m).exp())).ln();
        lse - logits[p]
    });
    compensated_sum(per_query) / queries.len() as f64
}

/// Every node of the positive's type whose similarity to the query at the
/// label time lies strictly inside the band, by exhaustive scan.
pub fn band_enumeration(
    g: &TemporalGraph,
    label: &MatchLabel,
    index: usize,
    params: &MiningParams,
) -> BTreeSet<(NodeRef, u64)> {
    let t_pos = label_time(params.rng_seed, index, label);
    let q = g.text_embedding_at(label.query, t_pos).unwrap().to_vec();
    let mut out = BTreeSet::new();
    for &v in g.nodes_of_type(label.positive.node_type) {
        if v == label.positive {
            continue;
        }
        let periods = g.activity(v).unwrap();
        if periods.is_empty() {
            continue;
        }
        let t = candidate_time(params.rng_seed, index, v, periods);
        let s = reference_cosine(&q, g.text_embedding_at(v, t).unwrap());
        if s > params.sigma_low && s < params.sigma_high {
            out.insert((v, t.to_bits()));
        }
    }
    out
}

/// NDCG@k with binary gains straight from the definition.
pub fn reference_ndcg(scores: &[(u32, f64)], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    let mut order: Vec<(u32, f64)> = scores.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut dcg = 0.0;
    for (i, (id, _)) in order.iter().take(k).enumerate() {
        if relevant.contains(id) {
            dcg += 1.0 / (i as f64 + 2.0).log2();
        }
    }
    let ideal: f64 = (0..relevant.len().min(k)).map(|i| 1.0 / (i as f64 + 2.0).log2()).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}
