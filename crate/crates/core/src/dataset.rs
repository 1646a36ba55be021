//! A generated dataset directory and the training inputs derived from it.

use crate::error::{Error, Result};
use crate::negmine::MatchLabel;
use crate::store::{
    read_jsonl, store_from_lines, write_jsonl, ActivityLine, EdgeLine, FeatureLine, NodeLine,
    StoreSchemaFile, TemporalGraph,
};
use crate::synth::{Contract, DocLine, Interaction, InteractionKind, Manifest, Split, SplitBounds, World};
use crate::textmatch::{TokenDoc, TrainPair};
use crate::types::{NodeRef, NodeType, Relation, Task};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub schema: StoreSchemaFile,
    pub nodes: Vec<NodeLine>,
    pub edges: Vec<EdgeLine>,
    pub features: Vec<FeatureLine>,
    pub activity: Vec<ActivityLine>,
    pub docs: Vec<DocLine>,
    pub interactions: Vec<Interaction>,
    pub contracts: Vec<Contract>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Sorted event times per freelancer: interactions and applications.
#[derive(Clone, Debug, Default)]
pub struct ActivityLog {
    times: HashMap<u32, Vec<f64>>,
}

impl ActivityLog {
    /// Whether the freelancer did anything in `[t - window, t)`.
    pub fn active_within(&self, freelancer: u32, t: f64, window: f64) -> bool {
        match self.times.get(&freelancer) {
            None => false,
            Some(ts) => {
                let i = ts.partition_point(|&x| x < t);
                i > 0 && ts[i - 1] >= t - window
            }
        }
    }
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join("manifest.json").exists() {
            return Err(Error::InvalidArgument(format!(
                "{} does not contain a dataset (manifest.json missing)",
                dir.display()
            )));
        }
        let opt = |name: &str| -> Result<bool> { Ok(dir.join(name).exists()) };
        Ok(Dataset {
            manifest: read_json(&dir.join("manifest.json"))?,
            schema: read_json(&dir.join("schema.json"))?,
            nodes: read_jsonl(&dir.join("nodes.jsonl"))?,
            edges: read_jsonl(&dir.join("edges.jsonl"))?,
            features: read_jsonl(&dir.join("features.jsonl"))?,
            activity: read_jsonl(&dir.join("activity.jsonl"))?,
            docs: if opt("docs.jsonl")? { read_jsonl(&dir.join("docs.jsonl"))? } else { Vec::new() },
            interactions: if opt("interactions.jsonl")? {
                read_jsonl(&dir.join("interactions.jsonl"))?
            } else {
                Vec::new()
            },
            contracts: if opt("contracts.jsonl")? {
                read_jsonl(&dir.join("contracts.jsonl"))?
            } else {
                Vec::new()
            },
        })
    }

    pub fn from_world(w: &World) -> Self {
        Dataset {
            manifest: Manifest {
                format_version: 1,
                seed: w.config.seed,
                config: w.config.clone(),
                splits: SplitBounds::of(&w.config),
                counts: w.counts(),
                checksums: BTreeMap::new(),
            },
            schema: w.schema.clone(),
            nodes: w.nodes.clone(),
            edges: w.edges.clone(),
            features: w.features.clone(),
            activity: w.activity.clone(),
            docs: w.docs.clone(),
            interactions: w.interactions.clone(),
            contracts: w.contracts.clone(),
        }
    }

    pub fn splits(&self) -> &SplitBounds {
        &self.manifest.splits
    }

    pub fn graph(&self) -> Result<TemporalGraph> {
        store_from_lines(&self.schema, &self.nodes, &self.edges, self.features.clone(), &self.activity)
    }

    /// Replace the feature lines, e.g. with text embeddings attached.
    pub fn with_features(&self, features: Vec<FeatureLine>) -> Self {
        Dataset {
            features,
            ..self.clone()
        }
    }

    /// Write all files; `manifest.json` checksums are recomputed.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        json("schema.json", serde_json::to_vec_pretty(&self.schema)?)?;
        write_jsonl(&dir.join("nodes.jsonl"), &self.nodes)?;
        write_jsonl(&dir.join("edges.jsonl"), &self.edges)?;
        write_jsonl(&dir.join("features.jsonl"), &self.features)?;
        write_jsonl(&dir.join("activity.jsonl"), &self.activity)?;
        write_jsonl(&dir.join("docs.jsonl"), &self.docs)?;
        write_jsonl(&dir.join("interactions.jsonl"), &self.interactions)?;
        write_jsonl(&dir.join("contracts.jsonl"), &self.contracts)?;
        let mut manifest = self.manifest.clone();
        manifest.checksums = crate::synth::checksums(dir)?;
        json("manifest.json", serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Contracts of one split as labels in both orientations.
    pub fn labels(&self, split: Split) -> Result<Vec<MatchLabel>> {
        let mut out = Vec::new();
        for c in self.contracts.iter().filter(|c| c.split == split) {
            let fl = NodeRef::new(NodeType::Freelancer, c.freelancer);
            let jp = NodeRef::new(NodeType::JobPost, c.job_post);
            out.push(MatchLabel::new(fl, jp, c.t_start, c.t_end)?);
            out.push(MatchLabel::new(jp, fl, c.t_start, c.t_end)?);
        }
        Ok(out)
    }

    pub fn activity_log(&self) -> ActivityLog {
        let mut times: HashMap<u32, Vec<f64>> = HashMap::new();
        for i in &self.interactions {
            times.entry(i.freelancer).or_default().push(i.timestamp);
        }
        for e in &self.edges {
            if e.relation == Relation::Applied && e.src_type == NodeType::Freelancer {
                times.entry(e.src_id).or_default().push(e.timestamp);
            }
        }
        for ts in times.values_mut() {
            ts.sort_by(f64::total_cmp);
        }
        ActivityLog { times }
    }

    /// Text-encoder training pairs from events strictly before `before`.
    ///
    /// The weak set holds title/body pairs of every document version and
    /// clicks or saves in both orientations. The strong set holds
    /// interviews and hires in both orientations; freelancer queries carry
    /// impressed but not applied jobs as hard negatives, job queries carry
    /// applicants that were not interviewed.
    pub fn text_pairs(&self, before: f64) -> (Vec<TrainPair>, Vec<TrainPair>) {
        let docs = DocIndex::new(&self.docs);
        let mut weak = Vec::new();
        for d in self.docs.iter().filter(|d| d.timestamp < before) {
            let task = Task::for_query(d.node_type).unwrap_or(Task::FlToJp);
            weak.push(TrainPair {
                task,
                query: TokenDoc::new(d.title.clone()),
                positive: TokenDoc::new(d.body.clone()),
                hard_negatives: Vec::new(),
            });
        }
        let mut seen = HashSet::new();
        for i in &self.interactions {
            if i.timestamp >= before || i.kind == InteractionKind::Impression {
                continue;
            }
            if !seen.insert((i.freelancer, i.job_post)) {
                continue;
            }
            let fl = docs.at(NodeRef::new(NodeType::Freelancer, i.freelancer), i.timestamp);
            let jp = docs.at(NodeRef::new(NodeType::JobPost, i.job_post), i.timestamp);
            if let (Some(fl), Some(jp)) = (fl, jp) {
                weak.push(TrainPair { task: Task::FlToJp, query: fl.clone(), positive: jp.clone(), hard_negatives: Vec::new() });
                weak.push(TrainPair { task: Task::JpToFl, query: jp, positive: fl, hard_negatives: Vec::new() });
            }
        }

        let mut applied: HashMap<u32, HashSet<u32>> = HashMap::new();
        let mut applicants: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
        let mut interviewed: HashSet<(u32, u32)> = HashSet::new();
        for e in self.edges.iter().filter(|e| e.timestamp < before) {
            match e.relation {
                Relation::Applied => {
                    applied.entry(e.src_id).or_default().insert(e.dst_id);
                    applicants.entry(e.dst_id).or_default().push((e.src_id, e.timestamp));
                }
                Relation::Interviewed | Relation::Hired => {
                    interviewed.insert((e.dst_id, e.src_id));
                }
                _ => {}
            }
        }
        let mut impressed: HashMap<u32, Vec<(u32, f64)>> = HashMap::new();
        for i in self.interactions.iter().filter(|i| i.timestamp < before && i.kind == InteractionKind::Impression) {
            impressed.entry(i.freelancer).or_default().push((i.job_post, i.timestamp));
        }
        let mut strong = Vec::new();
        let mut pairs_seen = HashSet::new();
        for e in self.edges.iter().filter(|e| e.timestamp < before) {
            if !matches!(e.relation, Relation::Interviewed | Relation::Hired) {
                continue;
            }
            let (jp_id, fl_id, t) = (e.src_id, e.dst_id, e.timestamp);
            if !pairs_seen.insert((fl_id, jp_id)) {
                continue;
            }
            let fl = NodeRef::new(NodeType::Freelancer, fl_id);
            let jp = NodeRef::new(NodeType::JobPost, jp_id);
            let (Some(fl_doc), Some(jp_doc)) = (docs.at(fl, t), docs.at(jp, t)) else {
                continue;
            };
            let no_apply = applied.get(&fl_id);
            let mut fl_negs: Vec<(f64, u32)> = impressed
                .get(&fl_id)
                .map(|v| {
                    v.iter()
                        .filter(|(j, ts)| *j != jp_id && *ts < t && !no_apply.is_some_and(|a| a.contains(j)))
                        .map(|&(j, ts)| (t - ts, j))
                        .collect()
                })
                .unwrap_or_default();
            fl_negs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            fl_negs.dedup_by_key(|x| x.1);
            let fl_hard: Vec<TokenDoc> = fl_negs
                .iter()
                .filter_map(|&(_, j)| docs.at(NodeRef::new(NodeType::JobPost, j), t))
                .take(4)
                .collect();
            let jp_hard: Vec<TokenDoc> = applicants
                .get(&jp_id)
                .map(|v| {
                    v.iter()
                        .filter(|(f, ts)| *f != fl_id && *ts < t && !interviewed.contains(&(*f, jp_id)))
                        .filter_map(|&(f, _)| docs.at(NodeRef::new(NodeType::Freelancer, f), t))
                        .take(4)
                        .collect()
                })
                .unwrap_or_default();
            strong.push(TrainPair { task: Task::FlToJp, query: fl_doc.clone(), positive: jp_doc.clone(), hard_negatives: fl_hard });
            strong.push(TrainPair { task: Task::JpToFl, query: jp_doc, positive: fl_doc, hard_negatives: jp_hard });
        }
        (weak, strong)
    }
}

/// Document versions per node, newest at or before a time.
struct DocIndex<'a> {
    by_node: HashMap<NodeRef, Vec<&'a DocLine>>,
}

impl<'a> DocIndex<'a> {
    fn new(docs: &'a [DocLine]) -> Self {
        let mut by_node: HashMap<NodeRef, Vec<&DocLine>> = HashMap::new();
        for d in docs {
            by_node.entry(NodeRef::new(d.node_type, d.id)).or_default().push(d);
        }
        for v in by_node.values_mut() {
            v.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        }
        DocIndex { by_node }
    }

    fn at(&self, v: NodeRef, t: f64) -> Option<TokenDoc> {
        let vs = self.by_node.get(&v)?;
        let i = vs.partition_point(|d| d.timestamp <= t);
        let d = if i == 0 { vs.first()? } else { vs[i - 1] };
        let mut tokens = d.title.clone();
        tokens.extend(&d.body);
        Some(TokenDoc::new(tokens))
    }
}
