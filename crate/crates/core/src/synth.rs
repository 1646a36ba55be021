//! Deterministic synthetic marketplace with planted structure.
//!
//! Clients post jobs whose topics follow the client's taste, freelancers
//! browse, click and apply, clients invite, interview and hire. Hiring
//! weighs topic fit, feature fit and a bonus for prior work between the
//! freelancer and the posting client, which is visible only through the
//! graph. Freelancer topics drift, producing new feature versions.
//!
//! Output directory layout:
//!
//! | file                 | contents                                                     |
//! |----------------------|--------------------------------------------------------------|
//! | `schema.json`        | feature dims per type, `text_dim`, `vocab_size`               |
//! | `nodes.jsonl`        | `type`, `id`, `flags`                                         |
//! | `edges.jsonl`        | `src_type`, `src_id`, `dst_type`, `dst_id`, `relation`, `timestamp` |
//! | `features.jsonl`     | `type`, `id`, `timestamp`, `numeric`, `tokens`                |
//! | `activity.jsonl`     | `type`, `id`, `t_start`, `t_end`                              |
//! | `docs.jsonl`         | `type`, `id`, `timestamp`, `title`, `body`                    |
//! | `interactions.jsonl` | `kind` (impression/click/save), `freelancer`, `job_post`, `timestamp` |
//! | `contracts.jsonl`    | `freelancer`, `job_post`, `client`, `t_start`, `t_end`, `split`, `direct_offer` |
//! | `vocab.json`         | `tokens`                                                      |
//! | `manifest.json`      | config, seed, split boundaries, counts, SHA-256 per file      |

use crate::error::{Error, Result};
use crate::linalg::{dot, normalized};
use crate::store::{read_jsonl, write_jsonl, ActivityLine, EdgeLine, FeatureLine, NodeFlags, NodeLine, StoreSchemaFile};
use crate::types::{NodeType, Relation, DAY};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

pub const FEATURE_DIM: usize = 2;
/// Index of the profile-completion scalar in freelancer features.
pub const COMPLETION: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub freelancers: usize,
    pub clients: usize,
    pub job_posts: usize,
    pub topic_dim: usize,
    pub categories: usize,
    pub vocab_size: usize,
    pub text_dim: usize,
    pub train_days: usize,
    pub val_days: usize,
    pub eval_days: usize,
    /// Daily probability that an active freelancer's topic is re-sampled,
    /// producing a new feature version.
    pub drift_rate: f64,
    /// Weight of the prior-work bonus in interview and hire decisions.
    pub beta_graph: f64,
    /// Weight of topic fit in interview and hire decisions.
    pub kappa_topic: f64,
    /// Weight of experience-level fit in interview and hire decisions.
    pub kappa_feature: f64,
    pub freelancer_noise: f64,
    pub client_noise: f64,
    pub job_noise: f64,
    /// Fraction of freelancers present from day 0; the rest join uniformly.
    pub initial_freelancers: f64,
    pub browse_prob: f64,
    pub impressions_per_session: usize,
    pub apply_prob: f64,
    pub reinvite_prob: f64,
    pub hire_prob: f64,
    pub direct_offer_prob: f64,
    /// Share of direct offers reserved for freelancers with no edges yet.
    pub cold_offer_share: f64,
    pub open_days_min: f64,
    pub open_days_max: f64,
    /// Days from offer to contract start, drawn uniformly.
    pub start_lag_min: f64,
    pub start_lag_max: f64,
    /// Interviews happen up to this many days before the offer.
    pub interview_lead: f64,
    pub interviews_min: usize,
    pub interviews_max: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            freelancers: 2000,
            clients: 400,
            job_posts: 3000,
            topic_dim: 16,
            categories: 10,
            vocab_size: 2000,
            text_dim: 64,
            train_days: 76,
            val_days: 7,
            eval_days: 7,
            drift_rate: 0.03,
            beta_graph: 1.5,
            kappa_topic: 8.0,
            kappa_feature: 3.0,
            freelancer_noise: 0.6,
            client_noise: 0.6,
            job_noise: 0.4,
            initial_freelancers: 0.6,
            browse_prob: 0.25,
            impressions_per_session: 4,
            apply_prob: 0.35,
            reinvite_prob: 0.6,
            hire_prob: 0.75,
            direct_offer_prob: 0.5,
            cold_offer_share: 0.3,
            open_days_min: 5.0,
            open_days_max: 12.0,
            start_lag_min: 0.1,
            start_lag_max: 0.5,
            interview_lead: 0.25,
            interviews_min: 1,
            interviews_max: 3,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn horizon_days(&self) -> usize {
        self.train_days + self.val_days + self.eval_days
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_days() as f64 * DAY
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("world config: {m}")));
        if self.freelancers == 0 || self.clients == 0 || self.job_posts == 0 {
            return bad("node counts must be >= 1");
        }
        if self.topic_dim == 0 || self.categories == 0 || self.text_dim == 0 {
            return bad("topic_dim, categories and text_dim must be >= 1");
        }
        if self.vocab_size < 10 {
            return bad("vocab_size must be >= 10");
        }
        if self.train_days == 0 || self.eval_days == 0 {
            return bad("train_days and eval_days must be >= 1");
        }
        for (name, p) in [
            ("drift_rate", self.drift_rate),
            ("initial_freelancers", self.initial_freelancers),
            ("browse_prob", self.browse_prob),
            ("apply_prob", self.apply_prob),
            ("reinvite_prob", self.reinvite_prob),
            ("hire_prob", self.hire_prob),
            ("direct_offer_prob", self.direct_offer_prob),
            ("cold_offer_share", self.cold_offer_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.open_days_min > 0.0 && self.open_days_min <= self.open_days_max) {
            return bad("open_days_min must be positive and <= open_days_max");
        }
        if !(self.start_lag_min > 0.0 && self.start_lag_min <= self.start_lag_max) {
            return bad("start_lag_min must be positive and <= start_lag_max");
        }
        if !(self.interview_lead > 0.0) {
            return bad("interview_lead must be positive");
        }
        if self.interviews_min == 0 || self.interviews_min > self.interviews_max {
            return bad("interviews_min must be >= 1 and <= interviews_max");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    Impression,
    Click,
    Save,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub kind: InteractionKind,
    pub freelancer: u32,
    pub job_post: u32,
    pub timestamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub freelancer: u32,
    pub job_post: u32,
    pub client: u32,
    pub t_start: f64,
    pub t_end: f64,
    pub split: Split,
    pub direct_offer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocLine {
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub id: u32,
    pub timestamp: f64,
    pub title: Vec<u32>,
    pub body: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
}

/// One candidate in a hire decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HireOption {
    pub freelancer: u32,
    pub topic_fit: f64,
    pub feature_fit: f64,
    pub bonus: f64,
    pub chosen: bool,
}

/// A client's choice among interviewed freelancers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HireDecision {
    pub job_post: u32,
    pub timestamp: f64,
    pub options: Vec<HireOption>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: f64,
    pub val_end: f64,
    pub eval_end: f64,
}

impl SplitBounds {
    pub fn of(cfg: &WorldConfig) -> Self {
        SplitBounds {
            train_end: cfg.train_days as f64 * DAY,
            val_end: (cfg.train_days + cfg.val_days) as f64 * DAY,
            eval_end: cfg.horizon(),
        }
    }

    /// Contracts are assigned by the day their work starts.
    pub fn split_of(&self, t_end: f64) -> Split {
        if t_end < self.train_end {
            Split::Train
        } else if t_end < self.val_end {
            Split::Val
        } else {
            Split::Eval
        }
    }
}

/// A generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub schema: StoreSchemaFile,
    pub nodes: Vec<NodeLine>,
    pub edges: Vec<EdgeLine>,
    pub features: Vec<FeatureLine>,
    pub activity: Vec<ActivityLine>,
    pub docs: Vec<DocLine>,
    pub interactions: Vec<Interaction>,
    pub contracts: Vec<Contract>,
    pub vocab: Vocab,
    pub hire_decisions: Vec<HireDecision>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: WorldConfig,
    pub splits: SplitBounds,
    pub counts: BTreeMap<String, usize>,
    pub checksums: BTreeMap<String, String>,
}

pub const DATA_FILES: [&str; 9] = [
    "schema.json",
    "nodes.jsonl",
    "edges.jsonl",
    "features.jsonl",
    "activity.jsonl",
    "docs.jsonl",
    "interactions.jsonl",
    "contracts.jsonl",
    "vocab.json",
];

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if dot(&v, &v) > 1e-12 {
            return normalized(&v);
        }
    }
}

/// `normalize(center + scale * unit_noise)`
fn perturb(rng: &mut ChaCha8Rng, center: &[f64], scale: f64) -> Vec<f64> {
    let n = gaussian_unit(rng, center.len());
    let v: Vec<f64> = center.iter().zip(&n).map(|(c, e)| c + scale * e).collect();
    normalized(&v)
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(1e-12..1.0);
    -(-u.ln()).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn tier(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..3u32) as f64 / 2.0
}

/// Draw an index with probability proportional to `exp(logits)`.
fn softmax_pick(rng: &mut ChaCha8Rng, logits: &[f64]) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut r = rng.random_range(0.0..total);
    for (i, x) in w.iter().enumerate() {
        if r < *x {
            return i;
        }
        r -= x;
    }
    w.len() - 1
}

struct TokenModel {
    topical: usize,
    directions: Vec<Vec<f64>>,
    sharpness: f64,
}

impl TokenModel {
    fn new(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Self {
        let topical = (cfg.vocab_size * 4) / 5;
        TokenModel {
            topical,
            directions: (0..topical).map(|_| gaussian_unit(rng, cfg.topic_dim)).collect(),
            sharpness: 3.0 * (cfg.topic_dim as f64).sqrt(),
        }
    }

    fn cumulative(&self, topic: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .directions
            .iter()
            .map(|d| self.sharpness * dot(d, topic))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        logits
            .iter()
            .map(|l| {
                acc += (l - max).exp();
                acc
            })
            .collect()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, cum: &[f64], n: usize, generic_share: f64, vocab: usize) -> Vec<u32> {
        let total = *cum.last().unwrap();
        (0..n)
            .map(|_| {
                if self.topical < vocab && rng.random_bool(generic_share) {
                    rng.random_range(self.topical..vocab) as u32
                } else {
                    let r = rng.random_range(0.0..total);
                    cum.partition_point(|&c| c <= r).min(cum.len() - 1) as u32
                }
            })
            .collect()
    }

    fn doc(&self, rng: &mut ChaCha8Rng, topic: &[f64], vocab: usize) -> (Vec<u32>, Vec<u32>) {
        let cum = self.cumulative(topic);
        let title_len = rng.random_range(5..=8);
        let body_len = rng.random_range(20..=40);
        let title = self.draw(rng, &cum, title_len, 0.0, vocab);
        let body = self.draw(rng, &cum, body_len, 0.25, vocab);
        (title, body)
    }
}

struct Freelancer {
    topic: Vec<f64>,
    features: Vec<f64>,
    join: f64,
    edges: usize,
}

struct Job {
    client: u32,
    topic: Vec<f64>,
    features: Vec<f64>,
    post: f64,
    open_until: f64,
    decision: f64,
    direct: bool,
    close: Option<f64>,
    applicants: Vec<(u32, f64)>,
    invitees: Vec<u32>,
}

struct Sim<'c> {
    cfg: &'c WorldConfig,
    rng: ChaCha8Rng,
    tokens: TokenModel,
    fls: Vec<Freelancer>,
    jobs: Vec<Job>,
    client_taste: Vec<Vec<f64>>,
    /// (freelancer, client) -> (hires, interviews) so far
    history: HashMap<(u32, u32), (u32, u32)>,
    client_people: Vec<Vec<u32>>,
    edges: Vec<EdgeLine>,
    features: Vec<FeatureLine>,
    docs: Vec<DocLine>,
    interactions: Vec<Interaction>,
    contracts: Vec<Contract>,
    decisions: Vec<HireDecision>,
}

impl<'c> Sim<'c> {
    fn emit_version(&mut self, t: NodeType, id: u32, ts: f64, topic: Option<&[f64]>, numeric: Vec<f64>) {
        let tokens = topic.map(|tp| {
            let (title, body) = self.tokens.doc(&mut self.rng, tp, self.cfg.vocab_size);
            self.docs.push(DocLine {
                node_type: t,
                id,
                timestamp: ts,
                title: title.clone(),
                body: body.clone(),
            });
            let mut all = title;
            all.extend(body);
            all
        });
        self.features.push(FeatureLine {
            node_type: t,
            id,
            timestamp: ts,
            numeric,
            text_embedding: None,
            tokens,
        });
    }

    fn edge(&mut self, src: (NodeType, u32), dst: (NodeType, u32), relation: Relation, ts: f64) {
        self.edges.push(EdgeLine {
            src_type: src.0,
            src_id: src.1,
            dst_type: dst.0,
            dst_id: dst.1,
            relation,
            timestamp: ts,
        });
        if src.0 == NodeType::Freelancer {
            self.fls[src.1 as usize].edges += 1;
        }
        if dst.0 == NodeType::Freelancer {
            self.fls[dst.1 as usize].edges += 1;
        }
    }

    fn bonus(&self, fl: u32, client: u32) -> f64 {
        let (h, i) = self.history.get(&(fl, client)).copied().unwrap_or((0, 0));
        (1.0 + h as f64 + 0.5 * i as f64).ln()
    }

    fn feature_fit(&self, fl: u32, job: usize) -> f64 {
        1.0 - (self.fls[fl as usize].features[1] - self.jobs[job].features[0]).abs()
    }

    fn topic_fit(&self, fl: u32, job: usize) -> f64 {
        dot(&self.fls[fl as usize].topic, &self.jobs[job].topic)
    }

    fn active_freelancers(&self, t: f64) -> Vec<u32> {
        (0..self.fls.len() as u32)
            .filter(|&f| self.fls[f as usize].join <= t)
            .collect()
    }

    fn post_job(&mut self, j: usize) {
        let cfg = self.cfg;
        let (client, post) = (self.jobs[j].client, self.jobs[j].post);
        self.edge((NodeType::Client, client), (NodeType::JobPost, j as u32), Relation::Posted, post);
        let topic = self.jobs[j].topic.clone();
        let feats = self.jobs[j].features.clone();
        self.emit_version(NodeType::JobPost, j as u32, post, Some(&topic), feats);
        if self.jobs[j].direct {
            return;
        }
        // re-invite people the client worked with, then a few text matches
        let t_inv = (post + self.rng.random_range(0.0..0.5) * DAY).min(cfg.horizon() - 1.0);
        let mut invited: Vec<u32> = Vec::new();
        let people = self.client_people[client as usize].clone();
        for f in people {
            if invited.len() >= 2 {
                break;
            }
            if self.fls[f as usize].join <= t_inv && self.rng.random_bool(cfg.reinvite_prob) {
                invited.push(f);
            }
        }
        let active = self.active_freelancers(t_inv);
        if !active.is_empty() {
            let logits: Vec<f64> = active
                .iter()
                .map(|&f| cfg.kappa_topic * self.topic_fit(f, j))
                .collect();
            let extra = self.rng.random_range(1..=2);
            for _ in 0..extra {
                let f = active[softmax_pick(&mut self.rng, &logits)];
                if !invited.contains(&f) {
                    invited.push(f);
                }
            }
        }
        for &f in &invited {
            self.edge((NodeType::JobPost, j as u32), (NodeType::Freelancer, f), Relation::Invited, t_inv);
        }
        self.jobs[j].invitees = invited;
    }

    fn session(&mut self, f: u32, t: f64) {
        let cfg = self.cfg;
        let open: Vec<usize> = (0..self.jobs.len())
            .filter(|&j| {
                let jb = &self.jobs[j];
                jb.post <= t && t < jb.close.unwrap_or(jb.open_until) && t < jb.open_until
            })
            .collect();
        if open.is_empty() {
            return;
        }
        let weights: Vec<f64> = open
            .iter()
            .map(|&j| {
                let follow = if self.history.contains_key(&(f, self.jobs[j].client)) { 2.0 } else { 0.0 };
                (cfg.kappa_topic * 0.5 * self.topic_fit(f, j) + follow).exp()
            })
            .collect();
        let k = cfg.impressions_per_session.min(open.len());
        let picks = rand::seq::index::sample_weighted(&mut self.rng, open.len(), |i| weights[i], k)
            .expect("positive weights");
        let mut shown: Vec<usize> = picks.into_iter().map(|i| open[i]).collect();
        shown.sort_unstable();
        for j in shown {
            let ts = t + self.rng.random_range(0.0..600.0);
            let fit = self.topic_fit(f, j);
            self.interactions.push(Interaction {
                kind: InteractionKind::Impression,
                freelancer: f,
                job_post: j as u32,
                timestamp: ts,
            });
            let clicked = self.rng.random_bool(sigmoid(8.0 * (fit - 0.55)));
            if clicked {
                self.interactions.push(Interaction {
                    kind: InteractionKind::Click,
                    freelancer: f,
                    job_post: j as u32,
                    timestamp: ts + 1.0,
                });
                if self.rng.random_bool(0.2) {
                    self.interactions.push(Interaction {
                        kind: InteractionKind::Save,
                        freelancer: f,
                        job_post: j as u32,
                        timestamp: ts + 2.0,
                    });
                }
                let already = self.jobs[j].applicants.iter().any(|&(a, _)| a == f);
                if !already && !self.jobs[j].direct && self.rng.random_bool((2.0 * cfg.apply_prob * sigmoid(8.0 * (fit - 0.6))).min(1.0)) {
                    self.jobs[j].applicants.push((f, ts + 3.0));
                    self.edge((NodeType::Freelancer, f), (NodeType::JobPost, j as u32), Relation::Applied, ts + 3.0);
                }
            }
        }
    }

    fn record_hire(&mut self, j: usize, f: u32, t_start: f64, direct: bool) {
        let cfg = self.cfg;
        let t_end = t_start + self.rng.random_range(cfg.start_lag_min..=cfg.start_lag_max) * DAY;
        if t_end >= cfg.horizon() {
            return;
        }
        let client = self.jobs[j].client;
        self.jobs[j].close = Some(t_end);
        self.edge((NodeType::JobPost, j as u32), (NodeType::Freelancer, f), Relation::Hired, t_end);
        let entry = self.history.entry((f, client)).or_insert((0, 0));
        entry.0 += 1;
        if !self.client_people[client as usize].contains(&f) {
            self.client_people[client as usize].push(f);
        }
        let bounds = SplitBounds::of(cfg);
        self.contracts.push(Contract {
            freelancer: f,
            job_post: j as u32,
            client,
            t_start,
            t_end,
            split: bounds.split_of(t_end),
            direct_offer: direct,
        });
    }

    fn decide(&mut self, j: usize) {
        let cfg = self.cfg;
        let t = self.jobs[j].decision;
        let client = self.jobs[j].client;
        if self.jobs[j].direct {
            let cold_only = self.rng.random_bool(cfg.cold_offer_share);
            let pool: Vec<u32> = self
                .active_freelancers(t)
                .into_iter()
                .filter(|&f| !cold_only || self.fls[f as usize].edges == 0)
                .collect();
            if !pool.is_empty() {
                let logits: Vec<f64> = pool
                    .iter()
                    .map(|&f| {
                        cfg.kappa_topic * self.topic_fit(f, j)
                            + cfg.kappa_feature * self.feature_fit(f, j)
                            + cfg.beta_graph * self.bonus(f, client)
                    })
                    .collect();
                let f = pool[softmax_pick(&mut self.rng, &logits)];
                self.record_hire(j, f, t, true);
                return;
            }
            self.jobs[j].direct = false;
        }
        let cutoff = t - 0.5 * DAY;
        let mut pool: Vec<u32> = self.jobs[j]
            .applicants
            .iter()
            .filter(|&&(_, ts)| ts < cutoff)
            .map(|&(f, _)| f)
            .collect();
        for &f in &self.jobs[j].invitees {
            if !pool.contains(&f) {
                pool.push(f);
            }
        }
        if pool.is_empty() {
            return;
        }
        let score = |s: &Self, f: u32| {
            cfg.kappa_topic * s.topic_fit(f, j)
                + cfg.kappa_feature * s.feature_fit(f, j)
                + cfg.beta_graph * s.bonus(f, client)
        };
        let mut ranked: Vec<(f64, u32)> = pool
            .iter()
            .map(|&f| (score(self, f) + gumbel(&mut self.rng), f))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let m = self.rng.random_range(cfg.interviews_min..=cfg.interviews_max).min(ranked.len());
        let interviewed: Vec<u32> = ranked[..m].iter().map(|&(_, f)| f).collect();
        let mut options: Vec<HireOption> = interviewed
            .iter()
            .map(|&f| HireOption {
                freelancer: f,
                topic_fit: self.topic_fit(f, j),
                feature_fit: self.feature_fit(f, j),
                bonus: self.bonus(f, client),
                chosen: false,
            })
            .collect();
        for &f in &interviewed {
            let ts = t - self.rng.random_range(0.0..cfg.interview_lead) * DAY;
            self.edge((NodeType::JobPost, j as u32), (NodeType::Freelancer, f), Relation::Interviewed, ts);
            self.history.entry((f, client)).or_insert((0, 0)).1 += 1;
            if !self.client_people[client as usize].contains(&f) {
                self.client_people[client as usize].push(f);
            }
        }
        if !self.rng.random_bool(cfg.hire_prob) {
            return;
        }
        let logits: Vec<f64> = options
            .iter()
            .map(|o| cfg.kappa_topic * o.topic_fit + cfg.kappa_feature * o.feature_fit + cfg.beta_graph * o.bonus)
            .collect();
        let pick = softmax_pick(&mut self.rng, &logits);
        options[pick].chosen = true;
        let f = options[pick].freelancer;
        let before = self.contracts.len();
        self.record_hire(j, f, t, false);
        if self.contracts.len() > before {
            self.decisions.push(HireDecision {
                job_post: j as u32,
                timestamp: t,
                options,
            });
        }
    }

    fn drift(&mut self, f: u32, ts: f64, centroids: &[Vec<f64>]) {
        let cfg = self.cfg;
        let fl = &mut self.fls[f as usize];
        let c = if self.rng.random_bool(0.5) {
            // stay near the current topic
            fl.topic.clone()
        } else {
            centroids[self.rng.random_range(0..centroids.len())].clone()
        };
        let topic = perturb(&mut self.rng, &c, cfg.freelancer_noise);
        let fl = &mut self.fls[f as usize];
        fl.topic = topic.clone();
        fl.features[COMPLETION] = (fl.features[COMPLETION] + self.rng.random_range(0..3u32) as f64 / 10.0).min(1.0);
        let feats = fl.features.clone();
        self.emit_version(NodeType::Freelancer, f, ts, Some(&topic), feats);
    }
}

/// Simulate the marketplace day by day.
pub fn generate(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tokens = TokenModel::new(cfg, &mut rng);
    let horizon = cfg.horizon();
    let days = cfg.horizon_days();
    let centroids: Vec<Vec<f64>> = (0..cfg.categories).map(|_| gaussian_unit(&mut rng, cfg.topic_dim)).collect();

    let client_taste: Vec<Vec<f64>> = (0..cfg.clients)
        .map(|_| {
            let c = &centroids[rng.random_range(0..cfg.categories)];
            perturb(&mut rng, c, cfg.client_noise)
        })
        .collect();
    // Zipf-like activity over a shuffled client order
    let mut order: Vec<usize> = (0..cfg.clients).collect();
    order.shuffle(&mut rng);
    let mut client_weight = vec![0.0; cfg.clients];
    for (rank, &c) in order.iter().enumerate() {
        client_weight[c] = 1.0 / (rank as f64 + 1.0);
    }
    let client_logits: Vec<f64> = client_weight.iter().map(|w: &f64| w.ln()).collect();

    let fls: Vec<Freelancer> = (0..cfg.freelancers)
        .map(|_| {
            let c = &centroids[rng.random_range(0..cfg.categories)];
            let topic = perturb(&mut rng, c, cfg.freelancer_noise);
            let join = if rng.random_bool(cfg.initial_freelancers) {
                0.0
            } else {
                rng.random_range(0.0..horizon - DAY)
            };
            let features = vec![rng.random_range(5..=10u32) as f64 / 10.0, tier(&mut rng)];
            Freelancer {
                topic,
                features,
                join,
                edges: 0,
            }
        })
        .collect();

    let mut jobs: Vec<Job> = (0..cfg.job_posts)
        .map(|i| {
            let day = (i * days) / cfg.job_posts;
            let post = (day as f64 + rng.random_range(0.0..1.0)) * DAY;
            let client = softmax_pick(&mut rng, &client_logits) as u32;
            let topic = perturb(&mut rng, &client_taste[client as usize], cfg.job_noise);
            let open = rng.random_range(cfg.open_days_min..=cfg.open_days_max);
            let direct = rng.random_bool(cfg.direct_offer_prob);
            let decision = if direct {
                post + rng.random_range(0.0..1.0) * DAY
            } else {
                post + rng.random_range(1.5..(open - 0.5).max(1.6)) * DAY
            };
            Job {
                client,
                topic,
                features: vec![tier(&mut rng), tier(&mut rng)],
                post,
                open_until: (post + open * DAY).min(horizon),
                decision,
                direct,
                close: None,
                applicants: Vec::new(),
                invitees: Vec::new(),
            }
        })
        .collect();
    jobs.sort_by(|a, b| a.post.total_cmp(&b.post));

    let mut sim = Sim {
        cfg,
        rng,
        tokens,
        fls,
        jobs,
        client_taste,
        history: HashMap::new(),
        client_people: vec![Vec::new(); cfg.clients],
        edges: Vec::new(),
        features: Vec::new(),
        docs: Vec::new(),
        interactions: Vec::new(),
        contracts: Vec::new(),
        decisions: Vec::new(),
    };

    for c in 0..cfg.clients {
        let feats = vec![tier(&mut sim.rng), tier(&mut sim.rng)];
        sim.emit_version(NodeType::Client, c as u32, 0.0, None, feats);
    }
    let mut fl_order: Vec<u32> = (0..cfg.freelancers as u32).collect();
    fl_order.sort_by(|&a, &b| sim.fls[a as usize].join.total_cmp(&sim.fls[b as usize].join).then(a.cmp(&b)));
    let mut next_fl = 0;
    let mut next_job = 0;
    for day in 0..days {
        let (t0, t1) = (day as f64 * DAY, (day + 1) as f64 * DAY);
        while next_fl < fl_order.len() && sim.fls[fl_order[next_fl] as usize].join < t1 {
            let f = fl_order[next_fl];
            let (join, topic, feats) = {
                let fl = &sim.fls[f as usize];
                (fl.join, fl.topic.clone(), fl.features.clone())
            };
            sim.emit_version(NodeType::Freelancer, f, join, Some(&topic), feats);
            next_fl += 1;
        }
        if sim.active_freelancers(t1 - 1.0).is_empty() {
            return Err(Error::Generation {
                day,
                reason: "no active freelancers".into(),
            });
        }
        while next_job < sim.jobs.len() && sim.jobs[next_job].post < t1 {
            sim.post_job(next_job);
            next_job += 1;
        }
        for f in sim.active_freelancers(t1) {
            if sim.rng.random_bool(cfg.browse_prob) {
                let t = t0 + sim.rng.random_range(0.0..DAY - 900.0);
                if t >= sim.fls[f as usize].join {
                    sim.session(f, t);
                }
            }
        }
        let mut due: Vec<usize> = (0..next_job)
            .filter(|&j| sim.jobs[j].decision >= t0 && sim.jobs[j].decision < t1 && sim.jobs[j].close.is_none())
            .collect();
        due.sort_by(|&a, &b| sim.jobs[a].decision.total_cmp(&sim.jobs[b].decision).then(a.cmp(&b)));
        for j in due {
            if sim.jobs[j].decision < sim.jobs[j].open_until {
                sim.decide(j);
            }
        }
        if cfg.drift_rate > 0.0 {
            for f in sim.active_freelancers(t0) {
                if sim.rng.random_bool(cfg.drift_rate) {
                    let ts = t0 + sim.rng.random_range(0.0..DAY);
                    sim.drift(f, ts, &centroids);
                }
            }
        }
    }
    let _ = &sim.client_taste;

    let nodes: Vec<NodeLine> = (0..cfg.freelancers)
        .map(|i| (NodeType::Freelancer, i, true))
        .chain((0..cfg.clients).map(|i| (NodeType::Client, i, false)))
        .chain((0..cfg.job_posts).map(|i| (NodeType::JobPost, i, true)))
        .map(|(t, i, text)| NodeLine {
            node_type: t,
            id: i as u32,
            flags: NodeFlags { has_text: text },
        })
        .collect();
    let mut activity: Vec<ActivityLine> = Vec::new();
    for (i, f) in sim.fls.iter().enumerate() {
        activity.push(ActivityLine {
            node_type: NodeType::Freelancer,
            id: i as u32,
            t_start: f.join,
            t_end: horizon,
        });
    }
    for (j, job) in sim.jobs.iter().enumerate() {
        activity.push(ActivityLine {
            node_type: NodeType::JobPost,
            id: j as u32,
            t_start: job.post,
            t_end: job.close.unwrap_or(job.open_until),
        });
    }
    let mut edges = sim.edges;
    edges.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut features = sim.features;
    features.sort_by(|a, b| (a.node_type, a.id).cmp(&(b.node_type, b.id)).then(a.timestamp.total_cmp(&b.timestamp)));
    let mut docs = sim.docs;
    docs.sort_by(|a, b| (a.node_type, a.id).cmp(&(b.node_type, b.id)).then(a.timestamp.total_cmp(&b.timestamp)));
    let mut interactions = sim.interactions;
    interactions.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.kind.cmp(&b.kind)));
    let mut contracts = sim.contracts;
    contracts.sort_by(|a, b| a.t_end.total_cmp(&b.t_end).then(a.job_post.cmp(&b.job_post)));

    Ok(World {
        config: cfg.clone(),
        schema: StoreSchemaFile {
            feature_dims: NodeType::ALL.iter().map(|&t| (t, FEATURE_DIM)).collect(),
            text_dim: cfg.text_dim,
            vocab_size: Some(cfg.vocab_size),
        },
        nodes,
        edges,
        features,
        activity,
        docs,
        interactions,
        contracts,
        vocab: Vocab {
            tokens: (0..cfg.vocab_size).map(|i| format!("w{i:05}")).collect(),
        },
        hire_decisions: sim.decisions,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl World {
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut c = BTreeMap::new();
        c.insert("nodes".into(), self.nodes.len());
        c.insert("edges".into(), self.edges.len());
        c.insert("feature_versions".into(), self.features.len());
        c.insert("interactions".into(), self.interactions.len());
        c.insert("contracts".into(), self.contracts.len());
        c
    }

    /// Write every data file plus `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("schema.json"), &self.schema)?;
        write_jsonl(&dir.join("nodes.jsonl"), &self.nodes)?;
        write_jsonl(&dir.join("edges.jsonl"), &self.edges)?;
        write_jsonl(&dir.join("features.jsonl"), &self.features)?;
        write_jsonl(&dir.join("activity.jsonl"), &self.activity)?;
        write_jsonl(&dir.join("docs.jsonl"), &self.docs)?;
        write_jsonl(&dir.join("interactions.jsonl"), &self.interactions)?;
        write_jsonl(&dir.join("contracts.jsonl"), &self.contracts)?;
        write_json(&dir.join("vocab.json"), &self.vocab)?;
        let manifest = Manifest {
            format_version: 1,
            seed: self.config.seed,
            config: self.config.clone(),
            splits: SplitBounds::of(&self.config),
            counts: self.counts(),
            checksums: checksums(dir)?,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }
}

/// SHA-256 of every data file present in `dir`.
pub fn checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for name in DATA_FILES {
        let p = dir.join(name);
        if p.exists() {
            out.insert(name.to_string(), sha256_file(&p)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub nodes_per_type: BTreeMap<String, usize>,
    pub edges_per_relation: BTreeMap<String, usize>,
    pub edges: usize,
    pub feature_versions_per_type: BTreeMap<String, usize>,
    pub nodes_with_multiple_versions: usize,
    pub nodes_with_activity: BTreeMap<String, usize>,
    pub interactions_per_kind: BTreeMap<String, usize>,
    pub contracts_per_split: BTreeMap<String, usize>,
    pub contracts_per_day: Vec<usize>,
}

/// Counts of everything in a dataset directory.
pub fn describe(dir: &Path) -> Result<DatasetStats> {
    if !dir.join("nodes.jsonl").exists() {
        return Err(Error::InvalidArgument(format!(
            "{} does not contain a dataset (nodes.jsonl missing)",
            dir.display()
        )));
    }
    let nodes: Vec<NodeLine> = read_jsonl(&dir.join("nodes.jsonl"))?;
    let edges: Vec<EdgeLine> = read_jsonl(&dir.join("edges.jsonl"))?;
    let features: Vec<FeatureLine> = read_jsonl(&dir.join("features.jsonl"))?;
    let activity: Vec<ActivityLine> = read_jsonl(&dir.join("activity.jsonl"))?;
    let interactions: Vec<Interaction> = if dir.join("interactions.jsonl").exists() {
        read_jsonl(&dir.join("interactions.jsonl"))?
    } else {
        Vec::new()
    };
    let contracts: Vec<Contract> = if dir.join("contracts.jsonl").exists() {
        read_jsonl(&dir.join("contracts.jsonl"))?
    } else {
        Vec::new()
    };
    let mut s = DatasetStats::default();
    for n in &nodes {
        *s.nodes_per_type.entry(n.node_type.to_string()).or_default() += 1;
    }
    for e in &edges {
        *s.edges_per_relation.entry(e.relation.to_string()).or_default() += 1;
    }
    s.edges = edges.len();
    let mut per_node: HashMap<(NodeType, u32), usize> = HashMap::new();
    for f in &features {
        *s.feature_versions_per_type.entry(f.node_type.to_string()).or_default() += 1;
        *per_node.entry((f.node_type, f.id)).or_default() += 1;
    }
    s.nodes_with_multiple_versions = per_node.values().filter(|&&c| c > 1).count();
    let mut seen = HashSet::new();
    for a in &activity {
        if seen.insert((a.node_type, a.id)) {
            *s.nodes_with_activity.entry(a.node_type.to_string()).or_default() += 1;
        }
    }
    for i in &interactions {
        let k = serde_json::to_value(i.kind)?.as_str().unwrap_or_default().to_string();
        *s.interactions_per_kind.entry(k).or_default() += 1;
    }
    for c in &contracts {
        let k = serde_json::to_value(c.split)?.as_str().unwrap_or_default().to_string();
        *s.contracts_per_split.entry(k).or_default() += 1;
        let day = (c.t_end / DAY).floor().max(0.0) as usize;
        if s.contracts_per_day.len() <= day {
            s.contracts_per_day.resize(day + 1, 0);
        }
        s.contracts_per_day[day] += 1;
    }
    Ok(s)
}
