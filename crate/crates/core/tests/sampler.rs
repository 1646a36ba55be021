use graphmatch_core::sampler::{sample_subgraph, SamplerSpec};
use graphmatch_core::types::{NodeRef, RelDir};
use graphmatch_testkit::{RawGraph, RawSizes};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

fn random_spec(rng: &mut ChaCha8Rng) -> SamplerSpec {
    SamplerSpec {
        hops: rng.random_range(1..=3),
        per_relation_limit: rng.random_range(1..=6),
        temporal_edges: rng.random_bool(0.8),
        temporal_features: rng.random_bool(0.8),
    }
}

#[test]
fn matches_reference_sampler() {
    for seed in 0..4 {
        let raw = RawGraph::random(seed, RawSizes::default(), [2, 1, 3], 3);
        let g = raw.build();
        let groups = raw.edge_groups();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        for _ in 0..250 {
            let v = raw.nodes[rng.random_range(0..raw.nodes.len())].node;
            let t = rng.random_range(-1.0..101.0);
            let spec = random_spec(&mut rng);
            let sg = sample_subgraph(&g, v, t, &spec).unwrap();
            let (hops, edges) = raw.sample(v, t, &spec);
            assert_eq!(raw.sample_grouped(&groups, v, t, &spec), (hops.clone(), edges.clone()));
            let got: BTreeMap<NodeRef, u32> = sg.nodes.iter().map(|n| (n.node, n.hop)).collect();
            assert_eq!(got, hops, "{v} at {t} {spec:?}");
            let got_edges: BTreeSet<usize> = sg.edges.iter().map(|e| e.edge_seq as usize).collect();
            assert_eq!(got_edges, edges);
            for n in &sg.nodes {
                let at = if spec.temporal_features { t } else { f64::INFINITY };
                assert_eq!(n.features, raw.features_at(n.node, at).as_slice());
                assert_eq!(n.text, raw.text_at(n.node, at).as_slice());
            }
        }
    }
}

#[test]
fn point_in_time_draws_never_see_the_future() {
    let raw = RawGraph::random(11, RawSizes { edges: 600, ..Default::default() }, [1, 1, 1], 2);
    let g = raw.build();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2000 {
        let v = raw.nodes[rng.random_range(0..raw.nodes.len())].node;
        let t = rng.random_range(0.0..100.0);
        let spec = SamplerSpec { hops: rng.random_range(1..=3), per_relation_limit: rng.random_range(1..=10), ..Default::default() };
        let sg = sample_subgraph(&g, v, t, &spec).unwrap();
        assert!(sg.edges.iter().all(|e| e.timestamp < t));
        for n in &sg.nodes {
            if let Some(r) = n.feature_version {
                assert!(r.timestamp <= t);
            }
            if let Some(r) = n.text_version {
                assert!(r.timestamp <= t);
            }
        }
    }
}

#[test]
fn adjacency_respects_limit_and_recency() {
    let raw = RawGraph::random(12, RawSizes { edges: 800, ..Default::default() }, [1, 1, 1], 2);
    let g = raw.build();
    for n in raw.nodes.iter().take(30) {
        let spec = SamplerSpec { hops: 2, per_relation_limit: 3, ..Default::default() };
        let sg = sample_subgraph(&g, n.node, 60.0, &spec).unwrap();
        for i in 0..sg.nodes.len() {
            for rd in RelDir::all() {
                assert!(sg.neighbors_local(i, rd).len() <= 3);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Adding a hop never removes nodes or edges.
    #[test]
    fn more_hops_grow_the_subgraph(seed in 0u64..300, t in 0.0f64..100.0, limit in 1usize..6, hops in 1u32..3) {
        let raw = RawGraph::random(seed, RawSizes { edges: 150, ..Default::default() }, [1, 1, 1], 2);
        let g = raw.build();
        let v = raw.nodes[(seed as usize) % raw.nodes.len()].node;
        let a = sample_subgraph(&g, v, t, &SamplerSpec { hops, per_relation_limit: limit, ..Default::default() }).unwrap();
        let b = sample_subgraph(&g, v, t, &SamplerSpec { hops: hops + 1, per_relation_limit: limit, ..Default::default() }).unwrap();
        let na: BTreeSet<_> = a.nodes.iter().map(|n| n.node).collect();
        let nb: BTreeSet<_> = b.nodes.iter().map(|n| n.node).collect();
        prop_assert!(na.is_subset(&nb));
        let ea: BTreeSet<_> = a.edges.iter().map(|e| e.edge_seq).collect();
        let eb: BTreeSet<_> = b.edges.iter().map(|e| e.edge_seq).collect();
        prop_assert!(ea.is_subset(&eb));
    }

    /// A larger per-relation limit never removes nodes.
    #[test]
    fn larger_limit_grows_the_subgraph(seed in 0u64..300, t in 0.0f64..100.0, limit in 1usize..6) {
        let raw = RawGraph::random(seed, RawSizes { edges: 150, ..Default::default() }, [1, 1, 1], 2);
        let g = raw.build();
        let v = raw.nodes[(seed as usize * 7) % raw.nodes.len()].node;
        let a = sample_subgraph(&g, v, t, &SamplerSpec { per_relation_limit: limit, ..Default::default() }).unwrap();
        let b = sample_subgraph(&g, v, t, &SamplerSpec { per_relation_limit: limit + 1, ..Default::default() }).unwrap();
        let na: BTreeSet<_> = a.nodes.iter().map(|n| n.node).collect();
        let nb: BTreeSet<_> = b.nodes.iter().map(|n| n.node).collect();
        prop_assert!(na.is_subset(&nb));
    }
}
