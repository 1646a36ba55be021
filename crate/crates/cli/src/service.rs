//! Embedding service: newline-delimited JSON over TCP, one thread per
//! connection, over an immutable (snapshot, checkpoint, cache) triple that a
//! `reload` request swaps atomically.

use crate::stages::{load_embedded, now};
use graphmatch_core::model::GraphMatchModel;
use graphmatch_core::store::TemporalGraph;
use graphmatch_core::{Error, NodeRef, NodeType, Result};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Instant;

/// Latencies kept for percentile estimates.
const LATENCY_WINDOW: usize = 1 << 16;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
}

/// Text embeddings keyed by (node, version timestamp). Stored versions never
/// change, so entries are never invalidated; a reload builds a new cache.
#[derive(Debug, Default)]
pub struct TextCache {
    entries: RwLock<HashMap<(NodeRef, u64), Arc<[f64]>>>,
}

impl TextCache {
    /// Every stored text-bearing version of every node.
    pub fn prewarmed(g: &TemporalGraph) -> Result<Self> {
        let mut entries = HashMap::new();
        for &v in g.nodes() {
            for ver in g.versions(v)? {
                if let Some(t) = &ver.text_embedding {
                    entries.insert((v, ver.timestamp.to_bits()), Arc::from(t.as_slice()));
                }
            }
        }
        Ok(TextCache {
            entries: RwLock::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether the entry was present; a miss inserts it.
    pub fn lookup(&self, v: NodeRef, version: f64, text: &[f64]) -> bool {
        let key = (v, version.to_bits());
        if self.entries.read().unwrap().contains_key(&key) {
            return true;
        }
        self.entries.write().unwrap().insert(key, Arc::from(text));
        false
    }
}

pub struct Snapshot {
    pub graph: TemporalGraph,
    pub model: GraphMatchModel,
    pub checkpoint: String,
    pub cache: TextCache,
}

impl Snapshot {
    pub fn load(cfg: &ServeConfig) -> Result<Self> {
        let (_, graph) = load_embedded(&cfg.data)?;
        let model = GraphMatchModel::load(&cfg.checkpoint)?;
        Self::new(graph, model)
    }

    pub fn new(graph: TemporalGraph, model: GraphMatchModel) -> Result<Self> {
        if model.shape != graphmatch_core::model::InputShape::of(&graph) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint expects inputs {:?} but the snapshot provides {:?}",
                model.shape,
                graphmatch_core::model::InputShape::of(&graph)
            )));
        }
        Ok(Snapshot {
            cache: TextCache::prewarmed(&graph)?,
            checkpoint: model.fingerprint(),
            graph,
            model,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Embed,
    Stats,
    Reload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_type: Option<NodeType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl Request {
    pub fn embed(v: NodeRef, timestamp: Option<f64>) -> Self {
        Request {
            op: Op::Embed,
            node_type: Some(v.node_type),
            node_id: Some(v.node_id),
            timestamp,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub requests: u64,
    pub errors: u64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub cache_hit_rate: f64,
    pub degenerate: u64,
    pub cache_entries: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_hit: Option<bool>,
    /// The timestamp precedes every stored version, so the node's default
    /// features were used.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub default_features: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<StatsReport>,
    pub latency_us: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    errors: AtomicU64,
    cache_lookups: AtomicU64,
    cache_hits: AtomicU64,
    degenerate: AtomicU64,
    latencies: Mutex<VecDeque<u64>>,
}

impl Counters {
    fn record_latency(&self, us: u64) {
        let mut l = self.latencies.lock().unwrap();
        if l.len() == LATENCY_WINDOW {
            l.pop_front();
        }
        l.push_back(us);
    }

    fn report(&self, cache_entries: usize) -> StatsReport {
        let mut l: Vec<u64> = self.latencies.lock().unwrap().iter().copied().collect();
        l.sort_unstable();
        let pct = |p: f64| -> u64 {
            if l.is_empty() {
                0
            } else {
                l[((p * l.len() as f64).ceil() as usize).clamp(1, l.len()) - 1]
            }
        };
        let lookups = self.cache_lookups.load(Ordering::Relaxed);
        StatsReport {
            requests: self.requests.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
            p50_us: pct(0.5),
            p95_us: pct(0.95),
            p99_us: pct(0.99),
            cache_hit_rate: if lookups == 0 {
                0.0
            } else {
                self.cache_hits.load(Ordering::Relaxed) as f64 / lookups as f64
            },
            degenerate: self.degenerate.load(Ordering::Relaxed),
            cache_entries,
        }
    }
}

pub struct Service {
    source: Option<ServeConfig>,
    current: RwLock<Arc<Snapshot>>,
    counters: Counters,
}

struct Embedded {
    vector: Vec<f64>,
    cache_hit: Option<bool>,
    default_features: bool,
    degenerate: bool,
}

fn elapsed_us(start: Instant) -> u64 {
    (start.elapsed().as_micros() as u64).max(1)
}

impl Service {
    pub fn load(cfg: ServeConfig) -> Result<Self> {
        let snap = Snapshot::load(&cfg)?;
        Ok(Service {
            source: Some(cfg),
            current: RwLock::new(Arc::new(snap)),
            counters: Counters::default(),
        })
    }

    /// A service over an in-memory snapshot; `reload` re-installs it.
    pub fn from_snapshot(snap: Snapshot) -> Self {
        Service {
            source: None,
            current: RwLock::new(Arc::new(snap)),
            counters: Counters::default(),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().unwrap().clone()
    }

    /// Load a fresh triple from the configured paths and swap it in.
    /// Requests already holding the old triple finish on it.
    pub fn reload(&self) -> Result<String> {
        let snap = match &self.source {
            Some(cfg) => Snapshot::load(cfg)?,
            None => {
                let cur = self.snapshot();
                Snapshot::new(clone_graph(&cur.graph)?, cur.model.clone())?
            }
        };
        let id = snap.checkpoint.clone();
        *self.current.write().unwrap() = Arc::new(snap);
        Ok(id)
    }

    pub fn stats(&self) -> StatsReport {
        self.counters.report(self.snapshot().cache.len())
    }

    fn embed(&self, snap: &Snapshot, v: NodeRef, t: f64) -> Result<Embedded> {
        let r = snap.graph.resolve_at(v, t)?;
        let cache_hit = r.text_version.map(|tv| snap.cache.lookup(v, tv.timestamp, r.text));
        let e = snap.model.embed_detailed(&snap.graph, v, t)?;
        Ok(Embedded {
            vector: e.vector,
            cache_hit,
            default_features: r.feature_version.is_none(),
            degenerate: e.degenerate,
        })
    }

    /// Answer one protocol line.
    pub fn handle_line(&self, line: &str) -> Response {
        let start = Instant::now();
        let snap = self.snapshot();
        let mut resp = Response {
            checkpoint: snap.checkpoint.clone(),
            ..Default::default()
        };
        let req: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                resp.error = Some(format!("malformed request at line {} column {}: {e}", e.line(), e.column()));
                self.counters.errors.fetch_add(1, Ordering::Relaxed);
                resp.latency_us = elapsed_us(start);
                return resp;
            }
        };
        match req.op {
            Op::Stats => {
                resp.ok = true;
                resp.stats = Some(self.stats());
            }
            Op::Reload => match self.reload() {
                Ok(id) => {
                    resp.ok = true;
                    resp.checkpoint = id;
                }
                Err(e) => resp.error = Some(format!("reload failed: {e}")),
            },
            Op::Embed => {
                self.counters.requests.fetch_add(1, Ordering::Relaxed);
                let result = match (req.node_type, req.node_id) {
                    (Some(nt), Some(id)) => {
                        let v = NodeRef::new(nt, id);
                        if snap.graph.contains(v) {
                            self.embed(&snap, v, req.timestamp.unwrap_or_else(now))
                        } else {
                            Err(Error::UnknownNode(v))
                        }
                    }
                    _ => Err(Error::InvalidArgument("embed needs node_type and node_id".into())),
                };
                match result {
                    Ok(e) => {
                        if let Some(hit) = e.cache_hit {
                            self.counters.cache_lookups.fetch_add(1, Ordering::Relaxed);
                            if hit {
                                self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                        if e.degenerate {
                            self.counters.degenerate.fetch_add(1, Ordering::Relaxed);
                        }
                        resp.ok = true;
                        resp.embedding = Some(e.vector);
                        resp.cache_hit = e.cache_hit;
                        resp.default_features = e.default_features;
                        resp.degenerate = Some(e.degenerate);
                    }
                    Err(e) => resp.error = Some(e.to_string()),
                }
            }
        }
        if !resp.ok {
            self.counters.errors.fetch_add(1, Ordering::Relaxed);
        }
        resp.latency_us = elapsed_us(start);
        if req.op == Op::Embed && resp.ok {
            self.counters.record_latency(resp.latency_us);
        }
        resp
    }

    /// Serve one connection until the peer closes it.
    pub fn serve_connection(&self, stream: TcpStream) -> std::io::Result<()> {
        stream.set_nodelay(true)?;
        let mut out = std::io::BufWriter::new(stream.try_clone()?);
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp = self.handle_line(&line);
            serde_json::to_writer(&mut out, &resp)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        Ok(())
    }
}

fn clone_graph(g: &TemporalGraph) -> Result<TemporalGraph> {
    use graphmatch_core::store::{build_store, ActivityPeriod, EdgeRecord, FeatureVersion, NodeDescriptor};
    let mut nodes = Vec::new();
    let mut versions: Vec<(NodeRef, FeatureVersion)> = Vec::new();
    let mut activity: Vec<(NodeRef, ActivityPeriod)> = Vec::new();
    for &v in g.nodes() {
        let rec = g.main_record(v)?;
        nodes.push(NodeDescriptor {
            node: v,
            has_text: rec.has_text,
        });
        versions.extend(g.versions(v)?.iter().map(|x| (v, x.clone())));
        activity.extend(rec.activity.iter().map(|p| (v, *p)));
    }
    let edges = g
        .edges()
        .iter()
        .map(|e| EdgeRecord {
            src: e.src,
            dst: e.dst,
            relation: e.relation,
            timestamp: e.timestamp,
        })
        .collect();
    build_store(g.schema().clone(), nodes, edges, versions, activity)
}

/// A running server: its bound address and a way to stop accepting.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

/// Accept connections on `listener` in a background thread.
pub fn spawn(service: Arc<Service>, listener: TcpListener) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let accept = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let svc = service.clone();
            std::thread::spawn(move || {
                let _ = svc.serve_connection(stream);
            });
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
    })
}

/// Accept connections forever on the calling thread.
pub fn run(service: Arc<Service>, listener: TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let svc = service.clone();
        std::thread::spawn(move || {
            let _ = svc.serve_connection(stream);
        });
    }
    Ok(())
}

/// Blocking line-oriented client, for tests and tooling.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> std::io::Result<Self> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(Client {
            reader: BufReader::new(s.try_clone()?),
            writer: s,
        })
    }

    /// Send one raw line and read one response line.
    pub fn send_line(&mut self, line: &str) -> std::io::Result<Response> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        let mut buf = String::new();
        if self.reader.read_line(&mut buf)? == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "server closed the connection"));
        }
        serde_json::from_str(&buf).map_err(std::io::Error::other)
    }

    pub fn request(&mut self, req: &Request) -> std::io::Result<Response> {
        let line = serde_json::to_string(req).map_err(std::io::Error::other)?;
        self.send_line(&line)
    }
}
