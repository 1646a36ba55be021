//! One function per pipeline stage. Each reads its inputs from disk, writes
//! its artifacts and returns a summary that serializes to JSON.

use graphmatch_core::dataset::Dataset;
use graphmatch_core::eval::{EvalConfig, EvalReport};
use graphmatch_core::model::{CheckpointMeta, GraphMatchModel, ModelConfig, TrainConfig, TrainLabel};
use graphmatch_core::negmine::{MiningReport, TrainingQuintuple};
use graphmatch_core::pipeline::{
    embed_text, eval_cases, evaluate_model, evaluate_text, mine_training_set, run_ablation, standard_variants,
    train_text_model, train_variant, validation_labels, AblationRow, MineConfig, TextPipelineConfig, TextSummary,
    Variant,
};
use graphmatch_core::store::{read_jsonl, write_jsonl, TemporalGraph};
use graphmatch_core::synth::{describe, generate, DatasetStats, Manifest, Split, WorldConfig};
use graphmatch_core::textmatch::DualEncoderParams;
use graphmatch_core::{Error, NodeRef, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Configuration of every stage, read from one JSON file in which any
/// section or field may be left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfigs {
    pub world: WorldConfig,
    pub text: TextPipelineConfig,
    pub mine: MineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Random negatives attached to each validation label.
    pub val_negatives: usize,
}

impl Default for StageConfigs {
    fn default() -> Self {
        StageConfigs {
            world: WorldConfig::default(),
            text: TextPipelineConfig::default(),
            mine: MineConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            val_negatives: 4,
        }
    }
}

impl StageConfigs {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => read_json(p),
        }
    }

    /// Use one seed for every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.text.seed = seed;
        self.mine.params.rng_seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn variant(&self, name: &str) -> Result<Variant> {
        let all = standard_variants(&self.model);
        all.iter().find(|v| v.name == name).cloned().ok_or_else(|| {
            let names: Vec<&str> = all.iter().map(|v| v.name.as_str()).collect();
            Error::InvalidArgument(format!("unknown variant {name}; expected one of {}", names.join(", ")))
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Fail early, naming every input path that does not exist.
pub fn require_inputs(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("missing input: {}", missing.join(", "))))
    }
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn gen(cfg: &StageConfigs, out: &Path) -> Result<Manifest> {
    generate(&cfg.world)?.write(out)
}

pub fn train_text(cfg: &StageConfigs, data: &Path, out: &Path) -> Result<TextSummary> {
    require_inputs(&[data])?;
    let ds = Dataset::load(data)?;
    let (p, summary) = train_text_model(&ds, &cfg.text)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    p.save(out)?;
    Ok(summary)
}

pub fn embed_all(data: &Path, text_model: &Path, out: &Path) -> Result<Manifest> {
    require_inputs(&[data, text_model])?;
    let ds = Dataset::load(data)?;
    let p = DualEncoderParams::load(text_model)?;
    embed_text(&ds, &p)?.write(out)
}

/// Load a dataset whose versions carry text embeddings.
pub fn load_embedded(data: &Path) -> Result<(Dataset, TemporalGraph)> {
    require_inputs(&[data])?;
    let ds = Dataset::load(data)?;
    if ds.features.iter().any(|l| l.tokens.is_some() && l.text_embedding.is_none()) {
        return Err(Error::InvalidArgument(format!(
            "{} holds raw tokens without text embeddings; run embed-all first",
            data.display()
        )));
    }
    let g = ds.graph()?;
    Ok((ds, g))
}

pub fn mine(cfg: &StageConfigs, data: &Path, out: &Path) -> Result<MiningReport> {
    let (ds, g) = load_embedded(data)?;
    let labels = ds.labels(Split::Train)?;
    let (q, report) = mine_training_set(&g, &labels, &cfg.mine)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_jsonl(out, &q)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub labels: usize,
    pub best_step: usize,
    pub best_checkpoint: PathBuf,
    pub fingerprint: String,
    pub checkpoints: Vec<CheckpointMeta>,
}

fn validation(cfg: &StageConfigs, ds: &Dataset, g: &TemporalGraph) -> Result<Vec<TrainLabel>> {
    validation_labels(ds, g, cfg.val_negatives, cfg.mine.params.rng_seed)
}

/// Train one variant; every checkpoint goes to `out` and the selected one
/// is also written as `best.gmck`.
pub fn train_graph(cfg: &StageConfigs, variant: &str, data: &Path, quintuples: &Path, out: &Path) -> Result<TrainSummary> {
    require_inputs(&[quintuples])?;
    let (ds, g) = load_embedded(data)?;
    let q: Vec<TrainingQuintuple> = read_jsonl(quintuples)?;
    let v = cfg.variant(variant)?;
    let val = validation(cfg, &ds, &g)?;
    let outcome = train_variant(&g, &q, &val, &v, &cfg.train, Some(out))?;
    let best = out.join("best.gmck");
    outcome.model.save(&best)?;
    let summary = TrainSummary {
        variant: v.name,
        labels: graphmatch_core::model::group_quintuples(&q)?.len(),
        best_step: outcome.best_step,
        best_checkpoint: best,
        fingerprint: outcome.model.fingerprint(),
        checkpoints: outcome.checkpoints,
    };
    write_json(&out.join("train.json"), &summary)?;
    Ok(summary)
}

/// Reports for the text-only baseline and the checkpoint, in that order.
pub fn eval(cfg: &StageConfigs, data: &Path, checkpoint: &Path, label: &str) -> Result<Vec<EvalReport>> {
    require_inputs(&[checkpoint])?;
    let (ds, g) = load_embedded(data)?;
    let model = GraphMatchModel::load(checkpoint)?;
    let (cases, stats) = eval_cases(&ds, &g, &cfg.eval)?;
    Ok(vec![
        evaluate_text(&g, &cases, &stats, cfg.eval.k)?,
        evaluate_model(&g, &cases, &stats, label, &model, cfg.eval.k)?,
    ])
}

pub fn ablate(cfg: &StageConfigs, data: &Path, quintuples: &Path) -> Result<Vec<AblationRow>> {
    require_inputs(&[quintuples])?;
    let (ds, g) = load_embedded(data)?;
    let q: Vec<TrainingQuintuple> = read_jsonl(quintuples)?;
    let val = validation(cfg, &ds, &g)?;
    let (cases, stats) = eval_cases(&ds, &g, &cfg.eval)?;
    run_ablation(&g, &q, &val, &cases, &stats, &standard_variants(&cfg.model), &cfg.train, cfg.eval.k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedOutput {
    pub node_type: graphmatch_core::NodeType,
    pub node_id: u32,
    pub timestamp: f64,
    pub checkpoint: String,
    pub degenerate: bool,
    pub embedding: Vec<f64>,
}

pub fn embed(data: &Path, checkpoint: &Path, node: NodeRef, timestamp: Option<f64>) -> Result<EmbedOutput> {
    require_inputs(&[checkpoint])?;
    let (_, g) = load_embedded(data)?;
    let model = GraphMatchModel::load(checkpoint)?;
    let t = timestamp.unwrap_or_else(now);
    let e = model.embed_detailed(&g, node, t)?;
    Ok(EmbedOutput {
        node_type: node.node_type,
        node_id: node.node_id,
        timestamp: t,
        checkpoint: model.fingerprint(),
        degenerate: e.degenerate,
        embedding: e.vector,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "artifact", rename_all = "snake_case")]
pub enum Inspection {
    Dataset { manifest: Manifest, stats: DatasetStats },
    Checkpoint { fingerprint: String, config: ModelConfig, parameters: usize },
    TextModel { vocab_size: usize, dim: usize },
    Quintuples { total: usize, labels: usize, adversarial: usize, random: usize },
    Json { value: serde_json::Value },
}

/// Describe any artifact the pipeline writes.
pub fn inspect(path: &Path) -> Result<Inspection> {
    require_inputs(&[path])?;
    if path.is_dir() {
        let manifest: Manifest = read_json(&path.join("manifest.json"))?;
        return Ok(Inspection::Dataset {
            manifest,
            stats: describe(path)?,
        });
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "gmck" => {
            let m = GraphMatchModel::load(path)?;
            Ok(Inspection::Checkpoint {
                fingerprint: m.fingerprint(),
                parameters: m.params.scalar_count(),
                config: m.config,
            })
        }
        "jsonl" => {
            use graphmatch_core::negmine::NegKind;
            let q: Vec<TrainingQuintuple> = read_jsonl(path)?;
            Ok(Inspection::Quintuples {
                total: q.len(),
                labels: graphmatch_core::model::group_quintuples(&q)?.len(),
                adversarial: q.iter().filter(|x| x.neg_kind == NegKind::Adversarial).count(),
                random: q.iter().filter(|x| x.neg_kind == NegKind::Random).count(),
            })
        }
        "json" => Ok(Inspection::Json {
            value: read_json(path)?,
        }),
        _ => {
            let p = DualEncoderParams::load(path)?;
            Ok(Inspection::TextModel {
                vocab_size: p.vocab_size(),
                dim: p.dim(),
            })
        }
    }
}
