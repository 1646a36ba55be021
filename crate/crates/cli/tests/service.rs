mod common;

use common::{fixture, run, s};
use graphmatch_cli::service::{spawn, Client, Request, ServeConfig, Service, TextCache};
use graphmatch_cli::stages::EmbedOutput;
use graphmatch_core::model::GraphMatchModel;
use graphmatch_core::{NodeRef, NodeType};
use std::net::TcpListener;
use std::sync::Arc;

fn service() -> Arc<Service> {
    let f = fixture();
    Arc::new(
        Service::load(ServeConfig {
            data: f.embedded.clone(),
            checkpoint: f.checkpoint.clone(),
        })
        .unwrap(),
    )
}

fn serve() -> (Arc<Service>, graphmatch_cli::service::ServerHandle) {
    let svc = service();
    let h = spawn(svc.clone(), TcpListener::bind("127.0.0.1:0").unwrap()).unwrap();
    (svc, h)
}

#[test]
fn known_node_gets_a_unit_vector() {
    let (svc, h) = serve();
    let mut c = Client::connect(h.addr).unwrap();
    let r = c.request(&Request::embed(NodeRef::freelancer(2), Some(900_000.0))).unwrap();
    assert!(r.ok, "{:?}", r.error);
    let e = r.embedding.unwrap();
    assert_eq!(e.len(), svc.snapshot().model.config.d_gm);
    assert!((e.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    assert!(r.latency_us > 0);
    assert_eq!(r.checkpoint, svc.snapshot().checkpoint);
}

#[test]
fn repeated_requests_are_identical_and_hit_the_cache() {
    let (_svc, h) = serve();
    let mut c = Client::connect(h.addr).unwrap();
    let req = Request::embed(NodeRef::job_post(7), Some(1_200_000.0));
    let a = c.request(&req).unwrap();
    let b = c.request(&req).unwrap();
    assert!(a.ok && b.ok);
    assert_eq!(a.embedding, b.embedding);
    assert_eq!(b.cache_hit, Some(true));
}

#[test]
fn cache_misses_once_then_hits() {
    let cache = TextCache::default();
    let v = NodeRef::freelancer(1);
    assert!(!cache.lookup(v, 10.0, &[1.0, 0.0]));
    assert!(cache.lookup(v, 10.0, &[1.0, 0.0]));
    assert!(!cache.lookup(v, 11.0, &[1.0, 0.0]));
    assert_eq!(cache.len(), 2);
}

#[test]
fn errors_keep_the_connection_open() {
    let (_svc, h) = serve();
    let mut c = Client::connect(h.addr).unwrap();
    let unknown = c.request(&Request::embed(NodeRef::client(99_999), Some(1.0))).unwrap();
    assert!(!unknown.ok);
    assert!(unknown.error.unwrap().contains("unknown node"));
    assert!(unknown.latency_us > 0);

    let bad = c.send_line(r#"{"op": "embed", "node_type": "freelancer", "node_id": }"#).unwrap();
    assert!(!bad.ok);
    let msg = bad.error.unwrap();
    assert!(msg.contains("column 55"), "{msg}");

    let extra = c.send_line(r#"{"op": "embed", "node_type": "freelancer", "node_id": 1, "colour": 3}"#).unwrap();
    assert!(!extra.ok);
    let missing = c.send_line(r#"{"op": "embed", "node_type": "freelancer"}"#).unwrap();
    assert!(!missing.ok);

    let fine = c.request(&Request::embed(NodeRef::freelancer(1), Some(1_000_000.0))).unwrap();
    assert!(fine.ok);
}

#[test]
fn early_timestamps_are_flagged() {
    let (svc, h) = serve();
    let snap = svc.snapshot();
    let v = *snap
        .graph
        .nodes_of_type(NodeType::JobPost)
        .iter()
        .find(|&&v| snap.graph.versions(v).unwrap().first().is_some_and(|x| x.timestamp > 0.0))
        .unwrap();
    let first = snap.graph.versions(v).unwrap()[0].timestamp;
    let mut c = Client::connect(h.addr).unwrap();
    let early = c.request(&Request::embed(v, Some(first - 1.0))).unwrap();
    assert!(early.ok);
    assert!(early.default_features);
    assert_eq!(early.cache_hit, None);
    let later = c.request(&Request::embed(v, Some(first + 1.0))).unwrap();
    assert!(later.ok && !later.default_features);
}

#[test]
fn missing_timestamp_means_now() {
    let (svc, h) = serve();
    let mut c = Client::connect(h.addr).unwrap();
    let v = NodeRef::freelancer(4);
    let r = c.request(&Request::embed(v, None)).unwrap();
    let snap = svc.snapshot();
    // every stored event is far in the past, so any present time agrees
    let expected = snap.model.embed_node(&snap.graph, v, graphmatch_cli::stages::now()).unwrap();
    assert_eq!(r.embedding.unwrap(), expected);
}

#[test]
fn stats_count_requests() {
    let (_svc, h) = serve();
    let mut c = Client::connect(h.addr).unwrap();
    for i in 0..20 {
        assert!(c.request(&Request::embed(NodeRef::freelancer(i), Some(1_000_000.0))).unwrap().ok);
    }
    let _ = c.request(&Request::embed(NodeRef::freelancer(1_000_000), Some(1.0))).unwrap();
    let r = c.send_line(r#"{"op": "stats"}"#).unwrap();
    assert!(r.ok);
    let st = r.stats.unwrap();
    assert_eq!(st.requests, 21);
    assert_eq!(st.errors, 1);
    assert!(st.p50_us > 0 && st.p50_us <= st.p95_us && st.p95_us <= st.p99_us);
    assert!((0.0..=1.0).contains(&st.cache_hit_rate));
    assert!(st.cache_entries > 0);
}

#[test]
fn reload_swaps_the_triple() {
    let (svc, h) = serve();
    let mut c = Client::connect(h.addr).unwrap();
    let req = Request::embed(NodeRef::job_post(3), Some(1_100_000.0));
    let before = c.request(&req).unwrap();
    let old = svc.snapshot();
    let r = c.send_line(r#"{"op": "reload"}"#).unwrap();
    assert!(r.ok, "{:?}", r.error);
    assert_eq!(r.checkpoint, before.checkpoint);
    assert!(!Arc::ptr_eq(&old, &svc.snapshot()));
    // the old triple stays usable by whoever still holds it
    assert!(old.model.embed_node(&old.graph, NodeRef::job_post(3), 1_100_000.0).is_ok());
    let after = c.request(&req).unwrap();
    assert_eq!(before.embedding, after.embedding);
}

#[test]
fn responses_equal_the_offline_embed_command() {
    let f = fixture();
    let (_svc, h) = serve();
    let mut c = Client::connect(h.addr).unwrap();
    for (t, id, ts) in [("freelancer", 3u32, 700_000.0), ("job_post", 11, 1_500_000.0), ("client", 2, 1_000_000.0)] {
        let out = run(&[
            "embed",
            "--data",
            s(&f.embedded),
            "--checkpoint",
            s(&f.checkpoint),
            "--node-type",
            t,
            "--node-id",
            &id.to_string(),
            "--timestamp",
            &ts.to_string(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let offline: EmbedOutput = serde_json::from_slice(&out.stdout).unwrap();
        let online = c
            .request(&Request::embed(NodeRef::new(NodeType::parse(t).unwrap(), id), Some(ts)))
            .unwrap();
        assert_eq!(online.embedding.unwrap(), offline.embedding);
        assert_eq!(online.checkpoint, offline.checkpoint);
    }
}

#[test]
fn concurrent_clients_get_correct_answers() {
    let (svc, h) = serve();
    let snap = svc.snapshot();
    let keys: Vec<(NodeRef, f64)> = (0..24).map(|i| (NodeRef::freelancer(i), 600_000.0 + 20_000.0 * i as f64)).collect();
    let expected: Vec<Vec<f64>> = keys.iter().map(|&(v, t)| snap.model.embed_node(&snap.graph, v, t).unwrap()).collect();
    let expected = Arc::new(expected);
    let keys = Arc::new(keys);
    let workers: Vec<_> = (0..4)
        .map(|w| {
            let (keys, expected, addr) = (keys.clone(), expected.clone(), h.addr);
            std::thread::spawn(move || {
                let mut c = Client::connect(addr).unwrap();
                for i in 0..60 {
                    let k = (i * 7 + w) % keys.len();
                    let r = c.request(&Request::embed(keys[k].0, Some(keys[k].1))).unwrap();
                    assert!(r.ok);
                    assert_eq!(r.embedding.as_ref().unwrap(), &expected[k]);
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let f = fixture();
    let snap = service().snapshot();
    let mut cfg = snap.model.config.clone();
    cfg.d_gm = 4;
    let mut shape = snap.model.shape;
    shape.text_dim += 1;
    let other = GraphMatchModel::init(cfg, shape).unwrap();
    let path = f.dir.join("mismatch.gmck");
    other.save(&path).unwrap();
    let err = Service::load(ServeConfig {
        data: f.embedded.clone(),
        checkpoint: path,
    })
    .err()
    .unwrap();
    assert!(err.to_string().contains("expects inputs"));
}
