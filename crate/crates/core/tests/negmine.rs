use graphmatch_core::linalg::normalized;
use graphmatch_core::negmine::*;
use graphmatch_core::store::{build_store, ActivityPeriod, FeatureVersion, NodeDescriptor, StoreSchema, TemporalGraph};
use graphmatch_core::types::{NodeRef, NodeType};
use graphmatch_testkit::band_enumeration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap};

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    normalized(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())
}

/// 100 freelancers and 100 job posts whose texts cluster around a few
/// centers, with text versions spread over time and one or two activity
/// periods each.
fn clustered(seed: u64) -> TemporalGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let centers: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, d)).collect();
    let mut nodes = Vec::new();
    let mut versions = Vec::new();
    let mut activity = Vec::new();
    for t in [NodeType::Freelancer, NodeType::JobPost] {
        for i in 0..100 {
            let v = NodeRef::new(t, i);
            nodes.push(NodeDescriptor { node: v, has_text: true });
            let c = &centers[rng.random_range(0..3)];
            for k in 0..rng.random_range(1..4) {
                let noise = unit(&mut rng, d);
                let s = rng.random_range(0.3..1.2);
                let text: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| a + s * b).collect();
                versions.push((v, FeatureVersion { timestamp: k as f64 * 30.0, numeric_features: vec![], text_embedding: Some(normalized(&text)) }));
            }
            let start = rng.random_range(0.0..50.0);
            activity.push((v, ActivityPeriod::new(start, start + rng.random_range(0.0..30.0))));
            if rng.random_bool(0.3) {
                activity.push((v, ActivityPeriod::new(start + 40.0, start + 60.0)));
            }
        }
    }
    build_store(StoreSchema::new([0, 0, 0], d), nodes, vec![], versions, activity).unwrap()
}

fn labels(g: &TemporalGraph, n: usize, seed: u64) -> Vec<MatchLabel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let f = g.nodes_of_type(NodeType::Freelancer)[rng.random_range(0..100)];
            let j = g.nodes_of_type(NodeType::JobPost)[rng.random_range(0..100)];
            let t0 = rng.random_range(0.0..90.0);
            let (q, p) = if i % 2 == 0 { (f, j) } else { (j, f) };
            MatchLabel::new(q, p, t0, t0 + rng.random_range(0.0..5.0)).unwrap()
        })
        .collect()
}

#[test]
fn full_pool_equals_brute_force_band() {
    for seed in 0..3 {
        let g = clustered(seed);
        let ls = labels(&g, 60, seed);
        let params = MiningParams { ann_candidates: 1000, rng_seed: seed, ..Default::default() };
        let idx = build_type_indices(&g, SearchKind::Exact, 0).unwrap();
        let mut report = MiningReport::default();
        let mut nonempty = 0;
        for (i, l) in ls.iter().enumerate() {
            let pool = adversarial_pool(&g, &idx, l, i, &params, &mut report).unwrap().unwrap();
            let got: BTreeSet<(NodeRef, u64)> = pool.iter().map(|s| (s.node, s.t_neg.to_bits())).collect();
            assert_eq!(got.len(), pool.len());
            let want = band_enumeration(&g, l, i, &params);
            assert_eq!(got, want, "label {i}");
            nonempty += !want.is_empty() as usize;
        }
        assert!(nonempty > 20, "band too sparse to be a meaningful check");
    }
}

#[test]
fn emitted_negatives_are_valid() {
    let g = clustered(4);
    let ls = labels(&g, 80, 4);
    let params = MiningParams { rng_seed: 4, ..Default::default() };
    let idx = build_type_indices(&g, SearchKind::Exact, 0).unwrap();
    let (qs, report) = mine_adversarial(&g, &idx, &ls, &params).unwrap();
    assert!(!qs.is_empty());
    assert_eq!(report.adversarial, qs.len());
    for q in &qs {
        assert_ne!(q.negative, q.positive);
        assert_eq!(q.negative.node_type, q.positive.node_type);
        let s = graphmatch_core::textmatch::cosine_sim(
            g.text_embedding_at(q.query, q.t_pos).unwrap(),
            g.text_embedding_at(q.negative, q.t_neg).unwrap(),
        )
        .unwrap();
        assert!(s > 0.5 && s < 0.85, "similarity {s}");
        assert!(g.activity(q.negative).unwrap().iter().any(|p| p.contains(q.t_neg)));
    }
    let per_label: HashMap<(NodeRef, NodeRef, u64), usize> = qs.iter().fold(HashMap::new(), |mut m, q| {
        *m.entry((q.query, q.positive, q.t_pos.to_bits())).or_default() += 1;
        m
    });
    assert!(per_label.values().all(|&c| c <= params.negatives_per_positive));
    let random = sample_random_negatives(&g, &ls, 3, 4).unwrap();
    assert_eq!(random.len(), ls.len() * 3);
    assert!(random.iter().all(|q| q.negative != q.positive && q.negative.node_type == q.positive.node_type));
}

#[test]
fn mining_is_deterministic_in_its_seed() {
    let g = clustered(5);
    let ls = labels(&g, 40, 5);
    let idx = build_type_indices(&g, SearchKind::Exact, 0).unwrap();
    let p = MiningParams { rng_seed: 11, ..Default::default() };
    let a = mine_adversarial(&g, &idx, &ls, &p).unwrap().0;
    let b = mine_adversarial(&g, &idx, &ls, &p).unwrap().0;
    assert_eq!(a, b);
    let c = mine_adversarial(&g, &idx, &ls, &MiningParams { rng_seed: 12, ..p }).unwrap().0;
    assert_ne!(a, c);
}

/// Counts of random negatives over many draws for one label are
/// consistent with a uniform choice among the other active nodes.
#[test]
fn random_negatives_are_uniform() {
    let g = clustered(6);
    let l = labels(&g, 1, 6);
    let draws = 30_000;
    let qs = sample_random_negatives(&g, &l, draws, 9).unwrap();
    let mut counts: HashMap<NodeRef, usize> = HashMap::new();
    for q in &qs {
        *counts.entry(q.negative).or_default() += 1;
    }
    let cells = 99;
    assert_eq!(counts.len(), cells);
    let expected = draws as f64 / cells as f64;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Wilson-Hilferty upper 0.1% point for 98 degrees of freedom
    let k = (cells - 1) as f64;
    let z = 3.09;
    let crit = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
    assert!(chi2 < crit, "chi-square {chi2} >= {crit}");
}

#[test]
fn invalid_parameters_are_rejected() {
    let bad = MiningParams { sigma_low: 0.9, sigma_high: 0.5, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = MiningParams { negatives_per_positive: 0, ..Default::default() };
    assert!(bad.validate().is_err());
    assert!(MatchLabel::new(NodeRef::freelancer(0), NodeRef::freelancer(1), 0.0, 1.0).is_err());
    assert!(MatchLabel::new(NodeRef::freelancer(0), NodeRef::job_post(1), 2.0, 1.0).is_err());
}

#[test]
fn quintuples_roundtrip_through_json() {
    let g = clustered(7);
    let ls = labels(&g, 5, 7);
    let qs = sample_random_negatives(&g, &ls, 2, 1).unwrap();
    for q in qs {
        let s = serde_json::to_string(&q).unwrap();
        assert!(s.contains("\"neg_kind\":\"random\""));
        let back: TrainingQuintuple = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
    }
}

#[test]
fn forest_recall_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let entries: Vec<IndexEntry> = (0..5000)
        .map(|i| IndexEntry {
            node: NodeRef::job_post(i),
            period: ActivityPeriod::new(0.0, 1.0),
            embedding: unit(&mut rng, 64),
        })
        .collect();
    let exact = TypeIndex::new(NodeType::JobPost, entries.clone(), SearchKind::Exact, 0);
    let forest = TypeIndex::new(NodeType::JobPost, entries, SearchKind::default_forest(), 3);
    let mut hit = 0;
    let mut total = 0;
    for _ in 0..50 {
        let q = unit(&mut rng, 64);
        let want: BTreeSet<usize> = exact.search(&q, 50).into_iter().map(|x| x.0).collect();
        let got: BTreeSet<usize> = forest.search(&q, 50).into_iter().map(|x| x.0).collect();
        hit += want.intersection(&got).count();
        total += want.len();
    }
    let recall = hit as f64 / total as f64;
    eprintln!("forest recall {recall}");
    assert!(recall >= 0.95, "recall {recall}");
}
