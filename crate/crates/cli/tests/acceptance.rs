//! Acceptance suite on the default synthetic world for seeds 7, 8 and 9.
//! Each test checks one numbered criterion and prints one PASS/FAIL line to
//! stderr. Unless marked as holding on every seed, a criterion passes when
//! it holds on at least two seeds.

use graphmatch_cli::service::{spawn, Client, Request, Service, Snapshot};
use graphmatch_cli::StageConfigs;
use graphmatch_core::dataset::Dataset;
use graphmatch_core::eval::{CaseStats, ColdSlice, EvalCase, EvalReport};
use graphmatch_core::model::{ConvKind, GraphMatchModel, InputShape, LossBatch, ModelConfig};
use graphmatch_core::negmine::{
    adversarial_pool, build_type_indices, MatchLabel, MiningParams, MiningReport, NegKind, SearchKind,
    TrainingQuintuple,
};
use graphmatch_core::pipeline::{
    embed_text, eval_cases, evaluate_model, evaluate_text, mine_training_set, train_text_model, train_variant,
    validation_labels,
};
use graphmatch_core::sampler::{sample_subgraph, SamplerSpec};
use graphmatch_core::store::{ActivityPeriod, EdgeRecord, FeatureVersion, NodeDescriptor, TemporalGraph};
use graphmatch_core::synth::{generate, Split};
use graphmatch_core::textmatch::{
    cosine_sim, infonce_loss, ContrastiveBatch, DualEncoderParams, Stage, TaskBatch, TextTrainConfig, TokenDoc,
    TrainPair,
};
use graphmatch_core::{NodeRef, NodeType, RelDir, Task};
use graphmatch_testkit::{band_enumeration, RawGraph, RawSizes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

const SEEDS: [u64; 3] = [7, 8, 9];

fn verdict(n: usize, title: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {tag} {title}: {detail}");
}

/// Timed criteria need the machine to themselves, so tests run one at a time.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn majority(flags: &[bool]) -> bool {
    flags.iter().filter(|&&f| f).count() >= 2
}

/// The shared, seed-specific part of the pipeline: dataset with text
/// embeddings, mined negatives, validation labels and evaluation cases.
struct Base {
    ds: Dataset,
    g: TemporalGraph,
    quintuples: Vec<TrainingQuintuple>,
    mining: MiningReport,
    val: Vec<graphmatch_core::model::TrainLabel>,
    cases: Vec<EvalCase>,
    stats: CaseStats,
    text_report: EvalReport,
    cfg: StageConfigs,
    secs: f64,
}

struct Trained {
    model: GraphMatchModel,
    report: EvalReport,
    secs: f64,
}

fn build_base(seed: u64) -> Base {
    let start = Instant::now();
    let cfg = StageConfigs::default().with_seed(seed);
    let raw = Dataset::from_world(&generate(&cfg.world).unwrap());
    let (text, _) = train_text_model(&raw, &cfg.text).unwrap();
    let ds = embed_text(&raw, &text).unwrap();
    let g = ds.graph().unwrap();
    let labels = ds.labels(Split::Train).unwrap();
    let (quintuples, mining) = mine_training_set(&g, &labels, &cfg.mine).unwrap();
    let val = validation_labels(&ds, &g, cfg.val_negatives, cfg.mine.params.rng_seed).unwrap();
    let (cases, stats) = eval_cases(&ds, &g, &cfg.eval).unwrap();
    let text_report = evaluate_text(&g, &cases, &stats, cfg.eval.k).unwrap();
    Base {
        ds,
        g,
        quintuples,
        mining,
        val,
        cases,
        stats,
        text_report,
        cfg,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn base(seed: u64) -> &'static Base {
    static CELLS: [OnceLock<Base>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let i = SEEDS.iter().position(|&s| s == seed).unwrap();
    CELLS[i].get_or_init(|| build_base(seed))
}

fn trained(seed: u64, variant: &str) -> Arc<Trained> {
    static CELLS: OnceLock<Mutex<HashMap<(u64, String), Arc<OnceLock<Arc<Trained>>>>>> = OnceLock::new();
    let cell = CELLS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry((seed, variant.to_string()))
        .or_default()
        .clone();
    cell.get_or_init(|| {
        let b = base(seed);
        let start = Instant::now();
        let v = b.cfg.variant(variant).unwrap();
        let out = train_variant(&b.g, &b.quintuples, &b.val, &v, &b.cfg.train, None).unwrap();
        let report = evaluate_model(&b.g, &b.cases, &b.stats, &v.name, &out.model, b.cfg.eval.k).unwrap();
        let _ = writeln!(
            std::io::stderr(),
            "  seed {seed} {variant}: FL->JP {:.4} JP->FL {:.4} query-cold {:.4} (best step {}, {:.0}s)",
            report.task(Task::FlToJp).ndcg,
            report.task(Task::JpToFl).ndcg,
            report.slice(ColdSlice::QueryCold).ndcg,
            out.best_step,
            start.elapsed().as_secs_f64()
        );
        Arc::new(Trained {
            model: out.model,
            report,
            secs: start.elapsed().as_secs_f64(),
        })
    })
    .clone()
}

fn fl_jp(r: &EvalReport) -> f64 {
    r.task(Task::FlToJp).ndcg
}

/// The dataset's store inputs as a reference graph.
fn raw_graph(ds: &Dataset) -> RawGraph {
    let schema = ds.schema.to_schema();
    RawGraph {
        feature_dims: schema.type_feature_dims,
        text_dim: schema.text_dim,
        nodes: ds
            .nodes
            .iter()
            .map(|n| NodeDescriptor {
                node: NodeRef::new(n.node_type, n.id),
                has_text: n.flags.has_text,
            })
            .collect(),
        edges: ds.edges.iter().map(EdgeRecord::from).collect(),
        versions: ds
            .features
            .iter()
            .map(|f| {
                (
                    f.node(),
                    FeatureVersion {
                        timestamp: f.timestamp,
                        numeric_features: f.numeric.clone(),
                        text_embedding: f.text_embedding.clone(),
                    },
                )
            })
            .collect(),
        activity: ds
            .activity
            .iter()
            .map(|a| (NodeRef::new(a.node_type, a.id), ActivityPeriod::new(a.t_start, a.t_end)))
            .collect(),
    }
}

fn horizon(b: &Base) -> f64 {
    b.ds.splits().eval_end
}

fn random_node(rng: &mut ChaCha8Rng, g: &TemporalGraph) -> NodeRef {
    g.nodes()[rng.random_range(0..g.node_count())]
}

#[test]
fn c01_point_in_time_lookups() {
    let _serial = serial();
    let mut ok = Vec::new();
    let mut details = Vec::new();
    for seed in SEEDS {
        let b = base(seed);
        let raw = raw_graph(&b.ds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let h = horizon(b);
        let queries: Vec<(NodeRef, f64, RelDir, usize)> = (0..10_000)
            .map(|_| {
                let v = random_node(&mut rng, &b.g);
                let t = match rng.random_range(0..8) {
                    0 => -1.0,
                    1 => {
                        let vs = b.g.versions(v).unwrap();
                        if vs.is_empty() {
                            0.0
                        } else {
                            vs[rng.random_range(0..vs.len())].timestamp
                        }
                    }
                    _ => rng.random_range(0.0..h * 1.05),
                };
                (v, t, RelDir::from_index(rng.random_range(0..RelDir::COUNT)), rng.random_range(1..12))
            })
            .collect();
        let start = Instant::now();
        let mut worst_excess = i64::MIN;
        let got: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = queries
            .iter()
            .map(|&(v, t, rd, limit)| {
                let n = b.g.versions(v).unwrap().len();
                let (_, cmp) = b.g.locate_version(v, t).unwrap();
                let bound = if n == 0 { 1 } else { (n as f64).log2().ceil() as i64 + 1 };
                worst_excess = worst_excess.max(cmp as i64 - bound);
                (
                    b.g.features_at(v, t).unwrap().to_vec(),
                    b.g.text_embedding_at(v, t).unwrap().to_vec(),
                    b.g.edges_before_dir(v, rd, t, limit).unwrap().map(|e| e.edge_seq as usize).collect(),
                )
            })
            .collect();
        let secs = start.elapsed().as_secs_f64();
        let mismatches = queries
            .iter()
            .zip(&got)
            .filter(|(&(v, t, rd, limit), (f, x, e))| {
                *f != raw.features_at(v, t) || *x != raw.text_at(v, t) || *e != raw.edges_before(v, rd, t, limit)
            })
            .count();
        ok.push(mismatches == 0 && worst_excess <= 0 && secs < 10.0);
        details.push(format!("seed {seed}: {mismatches} mismatches, comparisons over bound {worst_excess}, {secs:.2}s"));
    }
    let pass = ok.iter().all(|&x| x);
    verdict(1, "point-in-time store (all seeds)", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn c02_sampler_never_leaks() {
    let _serial = serial();
    let mut ok = Vec::new();
    let mut details = Vec::new();
    for seed in SEEDS {
        let b = base(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1ea4);
        let h = horizon(b);
        let spec = SamplerSpec::default();
        let start = Instant::now();
        let (mut bad_edges, mut bad_versions) = (0usize, 0usize);
        for _ in 0..10_000 {
            let v = random_node(&mut rng, &b.g);
            let t = rng.random_range(0.0..h);
            let sg = sample_subgraph(&b.g, v, t, &spec).unwrap();
            bad_edges += sg.edges.iter().filter(|e| e.timestamp >= t).count();
            bad_versions += sg
                .nodes
                .iter()
                .filter(|n| {
                    n.feature_version.is_some_and(|r| r.timestamp > t) || n.text_version.is_some_and(|r| r.timestamp > t)
                })
                .count();
        }
        let secs = start.elapsed().as_secs_f64();
        ok.push(bad_edges == 0 && bad_versions == 0 && secs < 60.0);
        details.push(format!("seed {seed}: {bad_edges} future edges, {bad_versions} future versions, {secs:.1}s"));
    }
    let pass = ok.iter().all(|&x| x);
    verdict(2, "sampler leakage (all seeds)", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn c03_sampler_equals_reference() {
    let _serial = serial();
    let mut ok = Vec::new();
    let mut details = Vec::new();
    for seed in SEEDS {
        let b = base(seed);
        let raw = raw_graph(&b.ds);
        let groups = raw.edge_groups();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e3);
        let h = horizon(b);
        let mut mismatches = 0;
        for i in 0..1000 {
            let v = random_node(&mut rng, &b.g);
            let t = rng.random_range(0.0..h);
            let spec = SamplerSpec {
                hops: rng.random_range(1..=2),
                per_relation_limit: rng.random_range(1..=10),
                temporal_edges: i % 5 != 0,
                temporal_features: i % 7 != 0,
            };
            let sg = sample_subgraph(&b.g, v, t, &spec).unwrap();
            let nodes: BTreeMap<NodeRef, u32> = sg.nodes.iter().map(|n| (n.node, n.hop)).collect();
            let edges: BTreeSet<usize> = sg.edges.iter().map(|e| e.edge_seq as usize).collect();
            if (nodes, edges) != raw.sample_grouped(&groups, v, t, &spec) {
                mismatches += 1;
            }
        }
        ok.push(mismatches == 0);
        details.push(format!("seed {seed}: {mismatches}/1000 draws differ"));
    }
    let pass = ok.iter().all(|&x| x);
    verdict(3, "sampler equals reference (all seeds)", pass, &details.join("; "));
    assert!(pass);
}

fn small_batch(rng: &mut ChaCha8Rng, raw: &RawGraph) -> LossBatch {
    let pick = |rng: &mut ChaCha8Rng, t: NodeType| loop {
        let v = raw.nodes[rng.random_range(0..raw.nodes.len())].node;
        if v.node_type == t {
            return v;
        }
    };
    let (qt, ct) = if rng.random_bool(0.5) {
        (NodeType::Freelancer, NodeType::JobPost)
    } else {
        (NodeType::JobPost, NodeType::Freelancer)
    };
    let mut b = LossBatch::new();
    for _ in 0..rng.random_range(2..=4) {
        let t = rng.random_range(1.0..100.0);
        b.queries.push((pick(rng, qt), t));
        b.candidates.push((pick(rng, ct), t));
        b.positive.push(b.candidates.len() - 1);
    }
    for _ in 0..rng.random_range(1..=4) {
        b.candidates.push((pick(rng, ct), rng.random_range(1.0..100.0)));
    }
    b
}

fn text_encoder_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc = |rng: &mut ChaCha8Rng| TokenDoc::new((0..rng.random_range(3..9)).map(|_| rng.random_range(0..30)).collect());
    let p = DualEncoderParams::init(30, 5, seed);
    let task = if seed % 2 == 0 { Task::FlToJp } else { Task::JpToFl };
    let pairs: Vec<TrainPair> = (0..4)
        .map(|_| TrainPair {
            task,
            query: doc(&mut rng),
            positive: doc(&mut rng),
            hard_negatives: vec![doc(&mut rng)],
        })
        .collect();
    let batch = TaskBatch::new(pairs.iter().collect()).unwrap();
    let cfg = TextTrainConfig {
        temperature: 0.2,
        ..Default::default()
    };
    let (_, grads) = p.batch_gradient(&batch, Stage::Strong, &cfg).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = p.param_set().ids().collect();
    for id in ids {
        let n = p.param_set().get(id).len();
        for _ in 0..12 {
            let k = rng.random_range(0..n);
            let mut a = p.clone();
            a.param_set_mut().get_mut(id).data[k] += h;
            let mut b = p.clone();
            b.param_set_mut().get_mut(id).data[k] -= h;
            let fd = (a.batch_gradient(&batch, Stage::Strong, &cfg).unwrap().0
                - b.batch_gradient(&batch, Stage::Strong, &cfg).unwrap().0)
                / (2.0 * h);
            let an = grads.get(id)[k];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-5));
        }
    }
    worst
}

#[test]
fn c04_gradients_match_finite_differences() {
    let _serial = serial();
    let start = Instant::now();
    let mut ok = Vec::new();
    let mut details = Vec::new();
    for seed in SEEDS {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for kind in [ConvKind::Mean, ConvKind::Attention] {
            for i in 0..20u64 {
                let raw = RawGraph::random(seed * 1000 + i, RawSizes::default(), [3, 2, 4], 5);
                let g = raw.build();
                let cfg = ModelConfig {
                    d_gm: 6,
                    hidden_dim: 7,
                    conv_kind: kind,
                    temperature: 0.3,
                    output_init_scale: 1.0,
                    sampler: SamplerSpec {
                        per_relation_limit: 3,
                        ..Default::default()
                    },
                    seed: seed * 1000 + i,
                    ..Default::default()
                };
                let m = GraphMatchModel::init(cfg, InputShape::of(&g)).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + i);
                let batch = small_batch(&mut rng, &raw);
                let r = m.grad_check(&g, &batch, 8, seed + i).unwrap();
                worst = worst.max(r.max_rel_error);
                checked += r.groups.iter().map(|gc| gc.checked).sum::<usize>();
            }
        }
        let text: f64 = (0..20).map(|i| text_encoder_error(seed * 100 + i)).fold(0.0, f64::max);
        ok.push(worst < 1e-4 && text < 1e-4 && checked > 0);
        details.push(format!("seed {seed}: graph {worst:.2e} over {checked} coordinates, text encoder {text:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = ok.iter().all(|&x| x) && secs < 300.0;
    verdict(4, "gradient checks (all seeds)", pass, &format!("{}; {secs:.0}s", details.join("; ")));
    assert!(pass);
}

#[test]
fn c05_loss_analytics() {
    let _serial = serial();
    let mut worst_ln2: f64 = 0.0;
    let mut flips = 0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng, d: usize| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        for _ in 0..100 {
            let x = unit(&mut rng, 8);
            let loss = infonce_loss(&ContrastiveBatch {
                task: Task::FlToJp,
                queries: vec![x.clone()],
                positives: vec![x.clone()],
                extra_negatives: vec![x],
                temperature: rng.random_range(0.01..10.0),
            })
            .unwrap()
            .loss;
            worst_ln2 = worst_ln2.max((loss - std::f64::consts::LN_2).abs());
        }
        for _ in 0..100 {
            let q: Vec<Vec<f64>> = (0..rng.random_range(1..6)).map(|_| unit(&mut rng, 8)).collect();
            let c: Vec<Vec<f64>> = (0..rng.random_range(2..12)).map(|_| unit(&mut rng, 8)).collect();
            let argmax = |tau: f64| -> Vec<usize> {
                q.iter()
                    .map(|qi| {
                        let l: Vec<f64> = c.iter().map(|cj| cosine_sim(qi, cj).unwrap() / tau).collect();
                        (0..l.len()).fold(0, |b, j| if l[j] > l[b] { j } else { b })
                    })
                    .collect()
            };
            let base = argmax(1.0);
            for tau in [0.01, 0.05, 0.5, 3.0] {
                flips += (argmax(tau) != base) as usize;
            }
        }
    }
    let pass = worst_ln2 < 1e-9 && flips == 0;
    verdict(
        5,
        "loss analytics (all seeds)",
        pass,
        &format!("max |loss - ln 2| = {worst_ln2:.1e}; {flips} argmax changes over 300 batches"),
    );
    assert!(pass);
}

/// 100 freelancers and 100 job posts from the dataset, with their stored
/// text versions and activity.
fn two_hundred_nodes(ds: &Dataset) -> (TemporalGraph, Vec<MatchLabel>) {
    let mut raw = raw_graph(ds);
    // the first 100 freelancers and 100 job posts to appear in contracts
    let (mut fl, mut jp) = (BTreeSet::new(), BTreeSet::new());
    for c in &ds.contracts {
        if fl.len() < 100 {
            fl.insert(c.freelancer);
        }
        if jp.len() < 100 {
            jp.insert(c.job_post);
        }
    }
    let keep: BTreeSet<NodeRef> = fl
        .iter()
        .map(|&i| NodeRef::freelancer(i))
        .chain(jp.iter().map(|&i| NodeRef::job_post(i)))
        .collect();
    raw.nodes.retain(|n| keep.contains(&n.node));
    raw.edges.clear();
    raw.versions.retain(|(v, _)| keep.contains(v));
    raw.activity.retain(|(v, _)| keep.contains(v));
    let g = raw.build();
    let labels = ds
        .contracts
        .iter()
        .filter(|c| fl.contains(&c.freelancer) && jp.contains(&c.job_post))
        .flat_map(|c| {
            let f = NodeRef::freelancer(c.freelancer);
            let j = NodeRef::job_post(c.job_post);
            [MatchLabel::new(f, j, c.t_start, c.t_end).unwrap(), MatchLabel::new(j, f, c.t_start, c.t_end).unwrap()]
        })
        .collect();
    (g, labels)
}

#[test]
fn c06_mining_fidelity() {
    let _serial = serial();
    let mut ok = Vec::new();
    let mut details = Vec::new();
    for seed in SEEDS {
        let b = base(seed);
        let (g, labels) = two_hundred_nodes(&b.ds);
        let params = MiningParams {
            ann_candidates: 200,
            rng_seed: seed,
            ..Default::default()
        };
        let idx = build_type_indices(&g, SearchKind::Exact, seed).unwrap();
        let mut report = MiningReport::default();
        let (mut differ, mut nonempty) = (0, 0);
        for (i, l) in labels.iter().enumerate() {
            let got: BTreeSet<(NodeRef, u64)> = match adversarial_pool(&g, &idx, l, i, &params, &mut report).unwrap() {
                Some(pool) => pool.iter().map(|s| (s.node, s.t_neg.to_bits())).collect(),
                None => BTreeSet::new(),
            };
            let want = band_enumeration(&g, l, i, &params);
            nonempty += !want.is_empty() as usize;
            differ += (got != want) as usize;
        }
        // every negative mined on the full graph
        let mut self_negatives = 0;
        let mut outside = 0;
        for q in b.quintuples.iter().filter(|q| q.neg_kind == NegKind::Adversarial) {
            self_negatives += (q.negative == q.positive) as usize;
            let s = cosine_sim(
                b.g.text_embedding_at(q.query, q.t_pos).unwrap(),
                b.g.text_embedding_at(q.negative, q.t_neg).unwrap(),
            )
            .unwrap();
            outside += !(s > 0.5 && s < 0.85) as usize;
        }
        self_negatives += b.quintuples.iter().filter(|q| q.negative == q.positive).count();
        ok.push(differ == 0 && nonempty > 0 && self_negatives == 0 && outside == 0);
        details.push(format!(
            "seed {seed}: {differ}/{} pools differ ({nonempty} non-empty), {} mined, {self_negatives} self-negatives, {outside} outside band",
            labels.len(),
            b.mining.adversarial
        ));
    }
    let pass = ok.iter().all(|&x| x);
    verdict(6, "mining fidelity (all seeds)", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn c07_fusion_beats_text() {
    let _serial = serial();
    let mut flags = Vec::new();
    let mut details = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in SEEDS {
        let b = base(seed);
        let full = trained(seed, "GraphMatch");
        let no_text = trained(seed, "GraphMatch-no-text");
        let (tm, gm, nt) = (fl_jp(&b.text_report), fl_jp(&full.report), fl_jp(&no_text.report));
        let runtime = b.secs + full.secs;
        slowest = slowest.max(runtime);
        flags.push(gm >= tm + 0.05 && nt < tm && nt < gm);
        details.push(format!("seed {seed}: TM {tm:.4} GM {gm:.4} no-text {nt:.4}, pipeline {runtime:.0}s"));
    }
    let pass = majority(&flags) && slowest < 1800.0;
    verdict(7, "fusion beats text on FL->JP", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn c08_adversarial_negatives_help() {
    let _serial = serial();
    let mut flags = Vec::new();
    let mut details = Vec::new();
    for seed in SEEDS {
        let full = fl_jp(&trained(seed, "GraphMatch").report);
        let random = fl_jp(&trained(seed, "GraphMatch-random-negatives").report);
        flags.push(full >= random + 0.02);
        details.push(format!("seed {seed}: adv+rand {full:.4} random-only {random:.4}"));
    }
    let pass = majority(&flags);
    verdict(8, "adversarial negatives help on FL->JP", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn c09_temporal_sampling_helps() {
    let _serial = serial();
    let mut flags = Vec::new();
    let mut details = Vec::new();
    for seed in SEEDS {
        let full = fl_jp(&trained(seed, "GraphMatch").report);
        let no_graph = fl_jp(&trained(seed, "GraphMatch-no-temporal-graph").report);
        let no_nodes = fl_jp(&trained(seed, "GraphMatch-no-temporal-nodes").report);
        flags.push(no_graph <= full - 0.03 && no_nodes <= full);
        details.push(format!("seed {seed}: full {full:.4} no-temporal-graph {no_graph:.4} no-temporal-nodes {no_nodes:.4}"));
    }
    let pass = majority(&flags);
    verdict(9, "temporal sampling helps on FL->JP", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn c10_cold_queries_keep_text_quality() {
    let _serial = serial();
    let mut flags = Vec::new();
    let mut details = Vec::new();
    for seed in SEEDS {
        let b = base(seed);
        let tm = b.text_report.slice(ColdSlice::QueryCold);
        let gm = trained(seed, "GraphMatch").report.slice(ColdSlice::QueryCold);
        flags.push(tm.cases > 0 && gm.ndcg >= tm.ndcg - 0.02);
        details.push(format!("seed {seed}: {} cases, TM {:.4} GM {:.4}", tm.cases, tm.ndcg, gm.ndcg));
    }
    let pass = majority(&flags);
    verdict(10, "query-cold parity", pass, &details.join("; "));
    assert!(pass);
}

fn rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1]
}

#[test]
fn c11_serving() {
    let _serial = serial();
    let b = base(7);
    let model = trained(7, "GraphMatch").model.clone();
    let offline_graph = b.ds.graph().unwrap();
    let svc = Arc::new(Service::from_snapshot(Snapshot::new(b.ds.graph().unwrap(), model.clone()).unwrap()));
    let handle = spawn(svc.clone(), std::net::TcpListener::bind("127.0.0.1:0").unwrap()).unwrap();
    let h = horizon(b);

    // parity and single-client latency
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut client = Client::connect(handle.addr).unwrap();
    let mut latencies = Vec::new();
    let mut mismatched = 0;
    for _ in 0..500 {
        let v = random_node(&mut rng, &offline_graph);
        let t = rng.random_range(0.0..h);
        let start = Instant::now();
        let r = client.request(&Request::embed(v, Some(t))).unwrap();
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
        let offline = model.embed_detailed(&offline_graph, v, t).unwrap().vector;
        mismatched += (!r.ok || r.embedding.as_deref() != Some(offline.as_slice())) as usize;
    }
    latencies.sort_by(f64::total_cmp);
    let (p50, p99) = (percentile(&latencies, 0.5), percentile(&latencies, 0.99));

    // soak: 16 clients, 1000 requests each, answers checked against offline
    let keys: Vec<(NodeRef, f64)> = (0..200).map(|_| (random_node(&mut rng, &offline_graph), rng.random_range(0.0..h))).collect();
    let expected: Vec<Vec<f64>> = keys.iter().map(|&(v, t)| model.embed_node(&offline_graph, v, t).unwrap()).collect();
    let (keys, expected) = (Arc::new(keys), Arc::new(expected));
    let mut rss = Vec::new();
    let mut errors = 0;
    for round in 0..4u64 {
        let workers: Vec<_> = (0..16u64)
            .map(|w| {
                let (keys, expected, addr) = (keys.clone(), expected.clone(), handle.addr);
                std::thread::spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(round * 100 + w);
                    let mut c = Client::connect(addr).unwrap();
                    let mut bad = 0;
                    for _ in 0..250 {
                        let k = rng.random_range(0..keys.len());
                        match c.request(&Request::embed(keys[k].0, Some(keys[k].1))) {
                            Ok(r) if r.ok && r.embedding.as_ref() == Some(&expected[k]) => {}
                            _ => bad += 1,
                        }
                    }
                    bad
                })
            })
            .collect();
        errors += workers.into_iter().map(|w| w.join().unwrap_or(1000)).sum::<usize>();
        rss.push(rss_kb().unwrap_or(0));
    }
    let stats = svc.stats();
    // after the first round has warmed every buffer, memory stays flat
    let growth_mb = (rss[3] as f64 - rss[1] as f64) / 1024.0;
    let pass = mismatched == 0 && p50 < 50.0 && p99 < 250.0 && errors == 0 && growth_mb < 32.0;
    verdict(
        11,
        "serving",
        pass,
        &format!(
            "{mismatched}/500 parity mismatches, p50 {p50:.2}ms p99 {p99:.2}ms, soak errors {errors}/16000, \
             rss after rounds {:?} MB, server p99 {}us, cache hit rate {:.3}",
            rss.iter().map(|k| k / 1024).collect::<Vec<_>>(),
            stats.p99_us,
            stats.cache_hit_rate
        ),
    );
    assert!(pass);
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn c12_determinism() {
    let _serial = serial();
    let bin = env!("CARGO_BIN_EXE_graphmatch");
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("short.json");
    std::fs::write(&cfg, r#"{"train": {"steps": 20, "checkpoint_every": 10}}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let run_once = |name: &str| -> std::path::PathBuf {
        let d = root.path().join(name);
        let p = |n: &str| d.join(n).to_str().unwrap().to_string();
        let steps: [Vec<String>; 6] = [
            vec!["gen".into(), "--config".into(), cfg.into(), "--seed".into(), "7".into(), "--out".into(), p("raw")],
            vec!["train-text".into(), "--config".into(), cfg.into(), "--seed".into(), "7".into(), "--data".into(), p("raw"), "--out".into(), p("text.tm")],
            vec!["embed-all".into(), "--data".into(), p("raw"), "--text-model".into(), p("text.tm"), "--out".into(), p("emb")],
            vec!["mine".into(), "--config".into(), cfg.into(), "--seed".into(), "7".into(), "--data".into(), p("emb"), "--out".into(), p("q.jsonl")],
            vec![
                "train-graph".into(), "--config".into(), cfg.into(), "--seed".into(), "7".into(), "--data".into(), p("emb"),
                "--quintuples".into(), p("q.jsonl"), "--out".into(), p("ck"),
            ],
            vec![
                "eval".into(), "--config".into(), cfg.into(), "--data".into(), p("emb"), "--checkpoint".into(), p("ck/best.gmck"),
                "--out".into(), p("report.json"),
            ],
        ];
        for args in steps {
            let out = std::process::Command::new(bin).args(&args).output().unwrap();
            assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
        d
    };
    let a = run_once("a");
    let b = run_once("b");
    let mut details = Vec::new();
    let mut pass = true;
    for (stage, sub) in [("gen", "raw"), ("embed-all", "emb"), ("train", "ck")] {
        let (fa, fb) = (files_under(&a.join(sub)), files_under(&b.join(sub)));
        let (fa, fb): (BTreeMap<_, _>, BTreeMap<_, _>) = if stage == "train" {
            // the summary records its own output path
            (
                fa.into_iter().filter(|(k, _)| k != "train.json").collect(),
                fb.into_iter().filter(|(k, _)| k != "train.json").collect(),
            )
        } else {
            (fa, fb)
        };
        let same = !fa.is_empty() && fa == fb;
        pass &= same;
        details.push(format!("{stage} {} files {}", fa.len(), if same { "identical" } else { "DIFFER" }));
    }
    for (stage, file) in [("train-text", "text.tm"), ("mine", "q.jsonl"), ("eval", "report.json")] {
        let same = std::fs::read(a.join(file)).unwrap() == std::fs::read(b.join(file)).unwrap();
        pass &= same;
        details.push(format!("{stage} {}", if same { "identical" } else { "DIFFERS" }));
    }
    verdict(12, "determinism", pass, &details.join(", "));
    assert!(pass);
}
