//! Offline ranking evaluation on day-level snapshots.
//!
//! For every day in the evaluation window the cut is noon of that day. A
//! contract whose work starts within the following 24 hours is a positive.
//! Freelancer queries rank every job post active at the cut; job-post
//! queries rank active freelancers with a profile completion above the
//! threshold who did something on the site in the preceding window.

use crate::dataset::ActivityLog;
use crate::error::{Error, Result};
use crate::model::GraphMatchModel;
use crate::store::TemporalGraph;
use crate::synth::{Contract, COMPLETION};
use crate::textmatch::cosine_sim;
use crate::types::{NodeRef, NodeType, Task, DAY};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdSlice {
    Warm,
    QueryCold,
    CandidateCold,
    BothCold,
}

impl ColdSlice {
    pub const ALL: [ColdSlice; 4] = [
        ColdSlice::Warm,
        ColdSlice::QueryCold,
        ColdSlice::CandidateCold,
        ColdSlice::BothCold,
    ];

    pub fn of(query_cold: bool, candidate_cold: bool) -> Self {
        match (query_cold, candidate_cold) {
            (false, false) => ColdSlice::Warm,
            (true, false) => ColdSlice::QueryCold,
            (false, true) => ColdSlice::CandidateCold,
            (true, true) => ColdSlice::BothCold,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColdSlice::Warm => "warm",
            ColdSlice::QueryCold => "query_cold",
            ColdSlice::CandidateCold => "candidate_cold",
            ColdSlice::BothCold => "both_cold",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub completion_threshold: f64,
    /// Seconds of recent activity required of freelancer candidates.
    pub recent_window: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 10,
            completion_threshold: 0.8,
            recent_window: 48.0 * 3600.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub task: Task,
    pub query: NodeRef,
    pub cut: f64,
    pub candidates: Vec<NodeRef>,
    pub relevant: Vec<NodeRef>,
    pub slice: ColdSlice,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseStats {
    pub cases: usize,
    /// Queries whose positives all fell outside the candidate pool.
    pub dropped: usize,
}

/// `DCG@k / IDCG@k` with binary gains; 0 when nothing is relevant.
pub fn ndcg_at_k(ranked_relevance: &[bool], relevant_total: usize, k: usize) -> f64 {
    let gain = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked_relevance
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| gain(i))
        .fold(0.0, |a, b| a + b);
    let idcg: f64 = (0..relevant_total.min(k)).map(gain).fold(0.0, |a, b| a + b);
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Candidates ordered by descending score, ties broken by ascending id.
pub fn rank(candidates: &[NodeRef], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].node_id.cmp(&candidates[b].node_id))
    });
    order
}

/// Evaluation cases for every day whose cut lies in `[from, to)`.
pub fn build_eval_cases(
    g: &TemporalGraph,
    contracts: &[Contract],
    log: &ActivityLog,
    from: f64,
    to: f64,
    cfg: &EvalConfig,
) -> Result<(Vec<EvalCase>, CaseStats)> {
    let mut cases = Vec::new();
    let mut stats = CaseStats::default();
    let first_day = (from / DAY).floor() as i64;
    let last_day = (to / DAY).ceil() as i64;
    for day in first_day..last_day {
        let cut = (day as f64 + 0.5) * DAY;
        if cut < from || cut >= to {
            continue;
        }
        let starting: Vec<&Contract> = contracts
            .iter()
            .filter(|c| c.t_end > cut && c.t_end <= cut + DAY)
            .collect();
        if starting.is_empty() {
            continue;
        }
        let mut jobs = Vec::new();
        for &v in g.nodes_of_type(NodeType::JobPost) {
            if g.is_active(v, cut)? {
                jobs.push(v);
            }
        }
        let mut freelancers = Vec::new();
        for &v in g.nodes_of_type(NodeType::Freelancer) {
            if g.is_active(v, cut)?
                && g.features_at(v, cut)?.get(COMPLETION).copied().unwrap_or(0.0) > cfg.completion_threshold
                && log.active_within(v.node_id, cut, cfg.recent_window)
            {
                freelancers.push(v);
            }
        }
        let mut grouped: BTreeMap<(Task, NodeRef), Vec<NodeRef>> = BTreeMap::new();
        for c in &starting {
            let fl = NodeRef::new(NodeType::Freelancer, c.freelancer);
            let jp = NodeRef::new(NodeType::JobPost, c.job_post);
            grouped.entry((Task::FlToJp, fl)).or_default().push(jp);
            grouped.entry((Task::JpToFl, jp)).or_default().push(fl);
        }
        for ((task, query), positives) in grouped {
            let pool = match task {
                Task::FlToJp => &jobs,
                Task::JpToFl => &freelancers,
            };
            if !g.is_active(query, cut)? {
                stats.dropped += 1;
                continue;
            }
            let mut relevant: Vec<NodeRef> = positives.into_iter().filter(|p| pool.contains(p)).collect();
            relevant.sort();
            relevant.dedup();
            if relevant.is_empty() {
                stats.dropped += 1;
                continue;
            }
            let query_cold = g.degree_before(query, cut)? == 0;
            let mut candidate_cold = true;
            for &r in &relevant {
                if g.degree_before(r, cut)? > 0 {
                    candidate_cold = false;
                }
            }
            cases.push(EvalCase {
                task,
                query,
                cut,
                candidates: pool.clone(),
                relevant,
                slice: ColdSlice::of(query_cold, candidate_cold),
            });
        }
    }
    stats.cases = cases.len();
    Ok((cases, stats))
}

/// Something that maps (node, time) pairs to vectors compared by cosine.
pub trait Embedder {
    fn name(&self) -> String;
    fn embed_many(&self, g: &TemporalGraph, items: &[(NodeRef, f64)]) -> Result<Vec<Vec<f64>>>;
}

/// Point-in-time text embeddings from the store.
pub struct TextEmbedder;

impl Embedder for TextEmbedder {
    fn name(&self) -> String {
        "TextMatch".into()
    }

    fn embed_many(&self, g: &TemporalGraph, items: &[(NodeRef, f64)]) -> Result<Vec<Vec<f64>>> {
        items
            .iter()
            .map(|&(v, t)| Ok(g.text_embedding_at(v, t)?.to_vec()))
            .collect()
    }
}

pub struct GraphEmbedder<'m> {
    pub label: String,
    pub model: &'m GraphMatchModel,
}

impl Embedder for GraphEmbedder<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn embed_many(&self, g: &TemporalGraph, items: &[(NodeRef, f64)]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .model
            .embed_many(g, items)?
            .into_iter()
            .map(|e| e.vector)
            .collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub ndcg: f64,
    pub cases: usize,
}

impl Metric {
    fn from_scores(scores: &[f64]) -> Self {
        Metric {
            ndcg: if scores.is_empty() {
                0.0
            } else {
                scores.iter().fold(0.0, |a, b| a + b) / scores.len() as f64
            },
            cases: scores.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub overall: Metric,
    pub slices: BTreeMap<String, Metric>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub k: usize,
    pub tasks: BTreeMap<String, TaskReport>,
    /// Every case of both tasks, split by cold-start slice.
    pub slices: BTreeMap<String, Metric>,
    pub dropped_cases: usize,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Metric {
        self.tasks.get(task.as_str()).map(|t| t.overall.clone()).unwrap_or_default()
    }

    pub fn slice(&self, slice: ColdSlice) -> Metric {
        self.slices.get(slice.as_str()).cloned().unwrap_or_default()
    }
}

/// Per-case NDCG@k for `embedder`, in case order.
pub fn case_scores(
    g: &TemporalGraph,
    cases: &[EvalCase],
    embedder: &dyn Embedder,
    k: usize,
) -> Result<Vec<f64>> {
    let mut keys: Vec<(NodeRef, u64)> = Vec::new();
    for c in cases {
        keys.push((c.query, c.cut.to_bits()));
        keys.extend(c.candidates.iter().map(|&v| (v, c.cut.to_bits())));
    }
    keys.sort();
    keys.dedup();
    let items: Vec<(NodeRef, f64)> = keys.iter().map(|&(v, t)| (v, f64::from_bits(t))).collect();
    let vectors = embedder.embed_many(g, &items)?;
    if vectors.len() != items.len() {
        return Err(Error::DimensionMismatch {
            expected: items.len(),
            got: vectors.len(),
        });
    }
    let table: HashMap<(NodeRef, u64), &Vec<f64>> = keys.iter().copied().zip(vectors.iter()).collect();
    cases
        .iter()
        .map(|c| {
            let q = table[&(c.query, c.cut.to_bits())];
            let scores: Vec<f64> = c
                .candidates
                .iter()
                .map(|v| cosine_sim(q, table[&(*v, c.cut.to_bits())]))
                .collect::<Result<_>>()?;
            let order = rank(&c.candidates, &scores);
            let rel: Vec<bool> = order.iter().map(|&i| c.relevant.contains(&c.candidates[i])).collect();
            Ok(ndcg_at_k(&rel, c.relevant.len(), k))
        })
        .collect()
}

pub fn evaluate(
    g: &TemporalGraph,
    cases: &[EvalCase],
    stats: &CaseStats,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<EvalReport> {
    let scores = case_scores(g, cases, embedder, k)?;
    let mut report = EvalReport {
        model: embedder.name(),
        k,
        dropped_cases: stats.dropped,
        ..Default::default()
    };
    for task in Task::ALL {
        let pick = |slice: Option<ColdSlice>| -> Vec<f64> {
            cases
                .iter()
                .zip(&scores)
                .filter(|(c, _)| c.task == task && slice.is_none_or(|s| c.slice == s))
                .map(|(_, &s)| s)
                .collect()
        };
        let mut tr = TaskReport {
            overall: Metric::from_scores(&pick(None)),
            ..Default::default()
        };
        for s in ColdSlice::ALL {
            tr.slices.insert(s.as_str().into(), Metric::from_scores(&pick(Some(s))));
        }
        report.tasks.insert(task.as_str().into(), tr);
    }
    for s in ColdSlice::ALL {
        let v: Vec<f64> = cases
            .iter()
            .zip(&scores)
            .filter(|(c, _)| c.slice == s)
            .map(|(_, &x)| x)
            .collect();
        report.slices.insert(s.as_str().into(), Metric::from_scores(&v));
    }
    Ok(report)
}

/// Plain-text table: one row per report, NDCG@k per task and slice.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let k = reports.first().map(|r| r.k).unwrap_or(10);
    let _ = writeln!(
        out,
        "{:<28} {:>10} {:>10} {:>10} {:>12} {:>15}",
        "model",
        format!("FL->JP@{k}"),
        format!("JP->FL@{k}"),
        "warm",
        "query_cold",
        "candidate_cold"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<28} {:>10.4} {:>10.4} {:>10.4} {:>12.4} {:>15.4}",
            r.model,
            r.task(Task::FlToJp).ndcg,
            r.task(Task::JpToFl).ndcg,
            r.slice(ColdSlice::Warm).ndcg,
            r.slice(ColdSlice::QueryCold).ndcg,
            r.slice(ColdSlice::CandidateCold).ndcg,
        );
    }
    out
}
