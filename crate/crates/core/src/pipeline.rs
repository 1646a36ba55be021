//! End-to-end stages: text encoder, text embeddings, negative mining,
//! graph-model training and the ablation grid.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{build_eval_cases, evaluate, CaseStats, EvalCase, EvalConfig, EvalReport, GraphEmbedder, TextEmbedder};
use crate::model::{group_quintuples, train, GraphMatchModel, InputShape, ModelConfig, TrainConfig, TrainLabel, TrainOutcome};
use crate::negmine::{
    build_type_indices, mine_adversarial, sample_random_negatives, MatchLabel, MiningParams, MiningReport, NegKind,
    SearchKind, TrainingQuintuple,
};
use crate::store::TemporalGraph;
use crate::synth::Split;
use crate::textmatch::{embed_all_nodes, train_stage, DualEncoderParams, Stage, StageReport, TextTrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextPipelineConfig {
    pub weak: TextTrainConfig,
    pub strong: TextTrainConfig,
    pub seed: u64,
}

impl Default for TextPipelineConfig {
    fn default() -> Self {
        TextPipelineConfig {
            weak: TextTrainConfig {
                epochs: 2,
                ..Default::default()
            },
            strong: TextTrainConfig {
                epochs: 3,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextSummary {
    pub weak_pairs: usize,
    pub strong_pairs: usize,
    pub weak: StageReport,
    pub strong: StageReport,
}

/// Two-stage contrastive training on events before the end of the
/// training window.
pub fn train_text_model(ds: &Dataset, cfg: &TextPipelineConfig) -> Result<(DualEncoderParams, TextSummary)> {
    let vocab = ds
        .schema
        .vocab_size
        .ok_or_else(|| Error::InvalidArgument("schema.json has no vocab_size".into()))?;
    let (weak_pairs, strong_pairs) = ds.text_pairs(ds.splits().train_end);
    let p = DualEncoderParams::init(vocab, ds.schema.text_dim, cfg.seed);
    let weak_cfg = TextTrainConfig {
        seed: cfg.seed ^ 1,
        ..cfg.weak.clone()
    };
    let strong_cfg = TextTrainConfig {
        seed: cfg.seed ^ 2,
        ..cfg.strong.clone()
    };
    let (p, weak) = train_stage(p, &weak_pairs, Stage::Weak, &weak_cfg)?;
    let (mut p, strong) = train_stage(p, &strong_pairs, Stage::Strong, &strong_cfg)?;
    // stored precision, so the model in memory embeds exactly like the saved file
    p.param_set_mut().round_to_f32();
    Ok((
        p,
        TextSummary {
            weak_pairs: weak_pairs.len(),
            strong_pairs: strong_pairs.len(),
            weak,
            strong,
        },
    ))
}

/// The dataset with every tokenized version replaced by its text embedding.
pub fn embed_text(ds: &Dataset, p: &DualEncoderParams) -> Result<Dataset> {
    if p.dim() != ds.schema.text_dim {
        return Err(Error::DimensionMismatch {
            expected: ds.schema.text_dim,
            got: p.dim(),
        });
    }
    let g = ds.graph()?;
    let lines = embed_all_nodes(p, &g, &ds.features)?;
    Ok(ds.with_features(lines))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub params: MiningParams,
    pub search: SearchKind,
    pub random_per_label: usize,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            params: MiningParams::default(),
            search: SearchKind::Exact,
            random_per_label: 1,
        }
    }
}

/// Adversarial and random negatives for every label. Both kinds share the
/// label's positive timestamp.
pub fn mine_training_set(
    g: &TemporalGraph,
    labels: &[MatchLabel],
    cfg: &MineConfig,
) -> Result<(Vec<TrainingQuintuple>, MiningReport)> {
    let indices = build_type_indices(g, cfg.search, cfg.params.rng_seed)?;
    let (mut out, mut report) = mine_adversarial(g, &indices, labels, &cfg.params)?;
    let random = sample_random_negatives(g, labels, cfg.random_per_label, cfg.params.rng_seed)?;
    report.random = random.len();
    out.extend(random);
    Ok((out, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMix {
    AdversarialAndRandom,
    RandomOnly,
    AdversarialOnly,
}

impl NegativeMix {
    pub fn keeps(self, kind: NegKind) -> bool {
        match self {
            NegativeMix::AdversarialAndRandom => true,
            NegativeMix::RandomOnly => kind == NegKind::Random,
            NegativeMix::AdversarialOnly => kind == NegKind::Adversarial,
        }
    }
}

pub fn select_negatives(quintuples: &[TrainingQuintuple], mix: NegativeMix) -> Vec<TrainingQuintuple> {
    quintuples.iter().copied().filter(|q| mix.keeps(q.neg_kind)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
    pub negatives: NegativeMix,
}

/// The standard grid: the full model with both negative mixes and one
/// variant per removed component.
pub fn standard_variants(base: &ModelConfig) -> Vec<Variant> {
    let v = |name: &str, model: ModelConfig, negatives| Variant {
        name: name.into(),
        model,
        negatives,
    };
    let mut no_text = base.clone();
    no_text.use_text = false;
    let mut no_feat = base.clone();
    no_feat.use_features = false;
    let mut no_tg = base.clone();
    no_tg.sampler.temporal_edges = false;
    let mut no_tn = base.clone();
    no_tn.sampler.temporal_features = false;
    vec![
        v("GraphMatch", base.clone(), NegativeMix::AdversarialAndRandom),
        v("GraphMatch-random-negatives", base.clone(), NegativeMix::RandomOnly),
        v("GraphMatch-no-text", no_text, NegativeMix::AdversarialAndRandom),
        v("GraphMatch-no-features", no_feat, NegativeMix::AdversarialAndRandom),
        v("GraphMatch-no-temporal-graph", no_tg, NegativeMix::AdversarialAndRandom),
        v("GraphMatch-no-temporal-nodes", no_tn, NegativeMix::AdversarialAndRandom),
    ]
}

/// Validation labels with random negatives attached.
pub fn validation_labels(ds: &Dataset, g: &TemporalGraph, per_label: usize, seed: u64) -> Result<Vec<TrainLabel>> {
    let labels = ds.labels(Split::Val)?;
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let q = sample_random_negatives(g, &labels, per_label.max(1), seed)?;
    group_quintuples(&q)
}

pub fn train_variant(
    g: &TemporalGraph,
    quintuples: &[TrainingQuintuple],
    val: &[TrainLabel],
    variant: &Variant,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let labels = group_quintuples(&select_negatives(quintuples, variant.negatives))?;
    let model = GraphMatchModel::init(variant.model.clone(), InputShape::of(g))?;
    train(model, g, &labels, val, cfg, checkpoint_dir)
}

/// Evaluation cases over the held-out window of the dataset.
pub fn eval_cases(ds: &Dataset, g: &TemporalGraph, cfg: &EvalConfig) -> Result<(Vec<EvalCase>, CaseStats)> {
    let s = ds.splits();
    build_eval_cases(g, &ds.contracts, &ds.activity_log(), s.val_end, s.eval_end, cfg)
}

pub fn evaluate_text(g: &TemporalGraph, cases: &[EvalCase], stats: &CaseStats, k: usize) -> Result<EvalReport> {
    evaluate(g, cases, stats, &TextEmbedder, k)
}

pub fn evaluate_model(
    g: &TemporalGraph,
    cases: &[EvalCase],
    stats: &CaseStats,
    label: &str,
    model: &GraphMatchModel,
    k: usize,
) -> Result<EvalReport> {
    let e = GraphEmbedder {
        label: label.to_string(),
        model,
    };
    evaluate(g, cases, stats, &e, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Option<Variant>,
    pub best_step: usize,
    pub report: EvalReport,
}

/// Train and evaluate every variant; the text-only model comes first.
pub fn run_ablation(
    g: &TemporalGraph,
    quintuples: &[TrainingQuintuple],
    val: &[TrainLabel],
    cases: &[EvalCase],
    stats: &CaseStats,
    variants: &[Variant],
    train_cfg: &TrainConfig,
    k: usize,
) -> Result<Vec<AblationRow>> {
    let mut rows = vec![AblationRow {
        variant: None,
        best_step: 0,
        report: evaluate_text(g, cases, stats, k)?,
    }];
    for v in variants {
        let out = train_variant(g, quintuples, val, v, train_cfg, None)?;
        rows.push(AblationRow {
            variant: Some(v.clone()),
            best_step: out.best_step,
            report: evaluate_model(g, cases, stats, &v.name, &out.model, k)?,
        });
    }
    Ok(rows)
}
