//! Graph embedding network over point-in-time subgraphs and its contrastive
//! training loop.
//!
//! A node's embedding is
//! `normalize(Out(h_L(target)) + Project(text(target)))`, where `h_0` comes
//! from a type-specific two-layer encoder over `[text ; numeric features]`
//! and each convolution layer averages relation-specific aggregates of the
//! neighbors' previous representations on top of a root transform.

use crate::autodiff::{Adam, Grads, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::negmine::TrainingQuintuple;
use crate::sampler::{sample_subgraph, SamplerSpec, Subgraph};
use crate::store::TemporalGraph;
use crate::textmatch::infonce;
use crate::types::{NodeRef, NodeType, RelDir, Task};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"GMCK";
const FORMAT_VERSION: u32 = 1;
const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Mean,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_gm: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub conv_kind: ConvKind,
    pub temperature: f64,
    /// Sampler used while training; inference always samples point-in-time.
    pub sampler: SamplerSpec,
    pub seed: u64,
    pub use_text: bool,
    pub use_features: bool,
    pub leaky_slope: f64,
    /// Scale applied to the initial output transform so that a fresh model
    /// starts close to its projected text embedding.
    pub output_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_gm: 64,
            layers: 2,
            hidden_dim: 64,
            conv_kind: ConvKind::Attention,
            temperature: 0.05,
            sampler: SamplerSpec::default(),
            seed: 0,
            use_text: true,
            use_features: true,
            leaky_slope: 0.2,
            output_init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_gm == 0 || self.layers == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument(
                "d_gm, layers and hidden_dim must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.sampler.validate()
    }
}

/// Input widths taken from the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub text_dim: usize,
    pub feature_dims: [usize; NodeType::COUNT],
}

impl InputShape {
    pub fn of(g: &TemporalGraph) -> Self {
        InputShape {
            text_dim: g.text_dim(),
            feature_dims: NodeType::ALL.map(|t| g.feature_dim(t)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EncoderIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvIds {
    /// Neighbor (value) transform.
    w: ParamId,
    b: ParamId,
    /// Target-side transform and scoring vector (attention only).
    q: Option<ParamId>,
    a: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    root_w: ParamId,
    root_b: ParamId,
    rel: Vec<ConvIds>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoders: Vec<EncoderIds>,
    layers: Vec<LayerIds>,
    out_w: ParamId,
    out_b: ParamId,
    proj: EncoderIds,
}

/// Parameter group names used by the gradient check.
pub const PARAM_GROUPS: [&str; 4] = ["encoder", "conv", "output", "projector"];

fn group_of(name: &str) -> &'static str {
    if name.starts_with("enc.") {
        "encoder"
    } else if name.starts_with("conv.") {
        "conv"
    } else if name.starts_with("out.") {
        "output"
    } else {
        "projector"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphMatchModel {
    pub config: ModelConfig,
    pub shape: InputShape,
    pub params: ParamSet,
    layout: Layout,
}

/// Result of one embedding: the unit vector, and whether the residual sum
/// was degenerate so the projected text embedding was returned instead.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

fn build_layout(
    config: &ModelConfig,
    shape: &InputShape,
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
) -> Layout {
    let h = config.hidden_dim;
    let encoders = NodeType::ALL
        .iter()
        .map(|t| {
            let input = shape.text_dim + shape.feature_dims[t.index()];
            EncoderIds {
                w1: params.add(format!("enc.{t}.w1"), Tensor::glorot(h, input, rng)),
                // nonzero so that featureless cold nodes still embed
                b1: params.add(format!("enc.{t}.b1"), Tensor::uniform(h, 1, 0.1, rng)),
                w2: params.add(format!("enc.{t}.w2"), Tensor::glorot(h, h, rng)),
                b2: params.add(format!("enc.{t}.b2"), Tensor::zeros(h, 1)),
            }
        })
        .collect();
    let layers = (0..config.layers)
        .map(|l| LayerIds {
            root_w: params.add(format!("conv.{l}.root.w"), Tensor::glorot(h, h, rng)),
            root_b: params.add(format!("conv.{l}.root.b"), Tensor::zeros(h, 1)),
            rel: RelDir::all()
                .map(|rd| {
                    let w = params.add(format!("conv.{l}.{rd}.w"), Tensor::glorot(h, h, rng));
                    let b = params.add(format!("conv.{l}.{rd}.b"), Tensor::zeros(h, 1));
                    let (q, a) = match config.conv_kind {
                        ConvKind::Mean => (None, None),
                        ConvKind::Attention => (
                            Some(params.add(format!("conv.{l}.{rd}.q"), Tensor::glorot(h, h, rng))),
                            Some(params.add(format!("conv.{l}.{rd}.a"), Tensor::glorot(h, 1, rng))),
                        ),
                    };
                    ConvIds { w, b, q, a }
                })
                .collect(),
        })
        .collect();
    let mut out = Tensor::glorot(config.d_gm, h, rng);
    out.data.iter_mut().for_each(|x| *x *= config.output_init_scale);
    let out_w = params.add("out.w", out);
    // a small constant keeps the sum away from zero when every rectifier is off
    let out_b = params.add("out.b", Tensor::uniform(config.d_gm, 1, 0.01 * config.output_init_scale, rng));
    let (t, d) = (shape.text_dim, config.d_gm);
    let (p1, p2) = if t == d {
        // start as the identity map: relu(x) - relu(-x)
        let mut p1 = Tensor::zeros(2 * t, t);
        let mut p2 = Tensor::zeros(d, 2 * t);
        for i in 0..t {
            p1.data[i * t + i] = 1.0;
            p1.data[(t + i) * t + i] = -1.0;
            p2.data[i * 2 * t + i] = 1.0;
            p2.data[i * 2 * t + t + i] = -1.0;
        }
        (p1, p2)
    } else {
        (Tensor::glorot(2 * t, t, rng), Tensor::glorot(d, 2 * t, rng))
    };
    let proj = EncoderIds {
        w1: params.add("proj.w1", p1),
        b1: params.add("proj.b1", Tensor::zeros(2 * t, 1)),
        w2: params.add("proj.w2", p2),
        b2: params.add("proj.b2", Tensor::zeros(d, 1)),
    };
    Layout {
        encoders,
        layers,
        out_w,
        out_b,
        proj,
    }
}

/// Queries and a shared, deduplicated candidate list with the index of each
/// query's positive.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBatch {
    pub queries: Vec<(NodeRef, f64)>,
    pub candidates: Vec<(NodeRef, f64)>,
    pub positive: Vec<usize>,
}

impl LossBatch {
    pub fn new() -> Self {
        LossBatch {
            queries: Vec::new(),
            candidates: Vec::new(),
            positive: Vec::new(),
        }
    }

    fn candidate_slot(&mut self, seen: &mut HashMap<(NodeRef, u64), usize>, v: NodeRef, t: f64) -> usize {
        *seen.entry((v, t.to_bits())).or_insert_with(|| {
            self.candidates.push((v, t));
            self.candidates.len() - 1
        })
    }

    /// One query per label; positives first, then every attached negative,
    /// identical (node, time) candidates merged.
    pub fn from_labels(labels: &[&TrainLabel], negatives: &[Vec<(NodeRef, f64)>]) -> Self {
        let mut b = LossBatch::new();
        let mut seen = HashMap::new();
        for l in labels {
            b.queries.push((l.query, l.t_pos));
            let p = b.candidate_slot(&mut seen, l.positive, l.t_pos);
            b.positive.push(p);
        }
        for negs in negatives {
            for &(v, t) in negs {
                b.candidate_slot(&mut seen, v, t);
            }
        }
        b
    }
}

impl Default for LossBatch {
    fn default() -> Self {
        Self::new()
    }
}

/// Forward pass state shared by every embedding computed on one tape.
pub struct BatchForward<'m, 'g> {
    model: &'m GraphMatchModel,
    g: &'g TemporalGraph,
    tape: Tape<'m>,
    h0: HashMap<(NodeRef, Option<u32>, Option<u32>), Var>,
    projected: HashMap<Option<u32>, Var>,
    strict: bool,
}

impl<'m, 'g> BatchForward<'m, 'g> {
    /// `strict` turns a degenerate residual sum into an error instead of
    /// falling back to the projected text embedding.
    pub fn new(model: &'m GraphMatchModel, g: &'g TemporalGraph, strict: bool) -> Self {
        BatchForward {
            model,
            g,
            tape: Tape::new(&model.params),
            h0: HashMap::new(),
            projected: HashMap::new(),
            strict,
        }
    }

    pub fn tape(&self) -> &Tape<'m> {
        &self.tape
    }

    fn encoder_input(&self, sg: &Subgraph<'_>, i: usize) -> Vec<f64> {
        let n = &sg.nodes[i];
        let cfg = &self.model.config;
        let mut x = Vec::with_capacity(n.text.len() + n.features.len());
        if cfg.use_text {
            x.extend_from_slice(n.text);
        } else {
            x.extend(std::iter::repeat(0.0).take(n.text.len()));
        }
        if cfg.use_features {
            x.extend_from_slice(n.features);
        } else {
            x.extend(std::iter::repeat(0.0).take(n.features.len()));
        }
        x
    }

    fn initial(&mut self, sg: &Subgraph<'_>, i: usize) -> Var {
        let n = &sg.nodes[i];
        let key = (
            n.node,
            n.feature_version.map(|r| r.row),
            n.text_version.map(|r| r.row),
        );
        if let Some(&v) = self.h0.get(&key) {
            return v;
        }
        let x = self.encoder_input(sg, i);
        let enc = self.model.layout.encoders[n.node.node_type.index()];
        let x = self.tape.constant(x);
        let h = self.tape.affine(enc.w1, enc.b1, x);
        let h = self.tape.relu(h);
        let h = self.tape.affine(enc.w2, enc.b2, h);
        let h = self.tape.relu(h);
        self.h0.insert(key, h);
        h
    }

    fn project(&mut self, sg: &Subgraph<'_>, i: usize) -> Var {
        let n = &sg.nodes[i];
        let key = n.text_version.map(|r| r.row).filter(|_| self.model.config.use_text);
        if let Some(&v) = self.projected.get(&key) {
            return v;
        }
        let text = if self.model.config.use_text {
            n.text.to_vec()
        } else {
            vec![0.0; n.text.len()]
        };
        let p = self.model.layout.proj;
        let x = self.tape.constant(text);
        let h = self.tape.affine(p.w1, p.b1, x);
        let h = self.tape.relu(h);
        let y = self.tape.affine(p.w2, p.b2, h);
        self.projected.insert(key, y);
        y
    }

    fn conv(&mut self, layer: usize, sg: &Subgraph<'_>, i: usize, prev: &[Option<Var>]) -> Var {
        let ids = &self.model.layout.layers[layer];
        let slope = self.model.config.leaky_slope;
        let hv = prev[i].expect("receptive field covers node");
        let mut per_rel = Vec::new();
        for rd in RelDir::all() {
            let nb = sg.neighbors_local(i, rd);
            if nb.is_empty() {
                continue;
            }
            let c = ids.rel[rd.index()];
            let keys: Vec<Var> = nb
                .iter()
                .map(|&u| {
                    let hu = prev[u as usize].expect("receptive field covers neighbor");
                    self.tape.matvec(c.w, hu)
                })
                .collect();
            let agg = match (c.q, c.a) {
                (Some(q), Some(a)) => {
                    let query = self.tape.matvec(q, hv);
                    self.tape.attend(query, &keys, a, slope)
                }
                _ => self.tape.mean(&keys),
            };
            per_rel.push(self.tape.add_param(agg, c.b));
        }
        let root = self.tape.affine(ids.root_w, ids.root_b, hv);
        let pre = if per_rel.is_empty() {
            root
        } else {
            let m = self.tape.mean(&per_rel);
            self.tape.add(root, m)
        };
        self.tape.relu(pre)
    }

    /// Final hidden state of the subgraph's target, computing only the
    /// representations inside its receptive field.
    fn hidden(&mut self, sg: &Subgraph<'_>) -> Var {
        let n = sg.nodes.len();
        let layers = self.model.config.layers;
        let mut needed = vec![vec![false; n]; layers + 1];
        needed[layers][sg.target_index()] = true;
        for l in (1..=layers).rev() {
            let (lower, upper) = needed.split_at_mut(l);
            let (below, here) = (&mut lower[l - 1], &upper[0]);
            for i in 0..n {
                if !here[i] {
                    continue;
                }
                below[i] = true;
                for rd in RelDir::all() {
                    for &u in sg.neighbors_local(i, rd) {
                        below[u as usize] = true;
                    }
                }
            }
        }
        let mut h: Vec<Option<Var>> = (0..n)
            .map(|i| needed[0][i].then(|| self.initial(sg, i)))
            .collect();
        for l in 1..=layers {
            h = (0..n)
                .map(|i| needed[l][i].then(|| self.conv(l - 1, sg, i, &h)))
                .collect();
        }
        h[sg.target_index()].expect("target computed")
    }

    /// Embedding variable of a sampled subgraph's target.
    pub fn embed_subgraph(&mut self, sg: &Subgraph<'_>) -> Result<(Var, bool)> {
        let hl = self.hidden(sg);
        let ids = &self.model.layout;
        let out = self.tape.affine(ids.out_w, ids.out_b, hl);
        let p = self.project(sg, sg.target_index());
        let sum = self.tape.add(out, p);
        let n = norm(self.tape.value(sum));
        if n < DEGENERATE_NORM || !n.is_finite() {
            if self.strict {
                return Err(Error::DegenerateEmbedding {
                    node: sg.target,
                    timestamp: sg.as_of,
                    norm: n,
                });
            }
            let pn = norm(self.tape.value(p));
            if !(pn >= DEGENERATE_NORM) {
                return Err(Error::DegenerateEmbedding {
                    node: sg.target,
                    timestamp: sg.as_of,
                    norm: n,
                });
            }
            return Ok((self.tape.normalize(p), true));
        }
        Ok((self.tape.normalize(sum), false))
    }

    pub fn embed(&mut self, v: NodeRef, t: f64, spec: &SamplerSpec) -> Result<(Var, bool)> {
        let sg = sample_subgraph(self.g, v, t, spec)?;
        self.embed_subgraph(&sg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// One positive pair with every negative attached to it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLabel {
    pub task: Task,
    pub query: NodeRef,
    pub positive: NodeRef,
    pub t_pos: f64,
    pub negatives: Vec<(NodeRef, f64)>,
}

/// Regroup quintuples by (query, positive, t_pos), in first-seen order.
pub fn group_quintuples(quintuples: &[TrainingQuintuple]) -> Result<Vec<TrainLabel>> {
    let mut index: HashMap<(NodeRef, NodeRef, u64), usize> = HashMap::new();
    let mut labels: Vec<TrainLabel> = Vec::new();
    for q in quintuples {
        let task = Task::for_query(q.query.node_type).ok_or_else(|| {
            Error::InvalidArgument(format!("quintuple query {} is not a matching side", q.query))
        })?;
        let k = *index
            .entry((q.query, q.positive, q.t_pos.to_bits()))
            .or_insert_with(|| {
                labels.push(TrainLabel {
                    task,
                    query: q.query,
                    positive: q.positive,
                    t_pos: q.t_pos,
                    negatives: Vec::new(),
                });
                labels.len() - 1
            });
        labels[k].negatives.push((q.negative, q.t_neg));
    }
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_every: usize,
    /// Cap on the attached negatives used per label per step; `None`
    /// uses all of them.
    pub max_negatives_per_label: Option<usize>,
    /// Validation batches per task.
    pub val_batches: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            checkpoint_every: 50,
            max_negatives_per_label: None,
            val_batches: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: GraphMatchModel,
    pub checkpoints: Vec<CheckpointMeta>,
    pub best_step: usize,
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
}

impl GraphMatchModel {
    pub fn init(config: ModelConfig, shape: InputShape) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let layout = build_layout(&config, &shape, &mut params, &mut rng);
        Ok(GraphMatchModel {
            config,
            shape,
            params,
            layout,
        })
    }

    /// The sampler used for every embedding served after training.
    pub fn inference_sampler(&self) -> SamplerSpec {
        self.config.sampler.temporal()
    }

    /// Encoder output for subgraph node `v`.
    pub fn initial_repr(&self, g: &TemporalGraph, sg: &Subgraph<'_>, v: NodeRef) -> Result<Vec<f64>> {
        let i = sg
            .local_index(v)
            .ok_or_else(|| Error::InvalidArgument(format!("node {v} not in subgraph")))?;
        let mut f = BatchForward::new(self, g, true);
        let h = f.initial(sg, i);
        Ok(f.tape.value(h).to_vec())
    }

    /// Apply convolution layer `layer` to every subgraph node.
    pub fn conv_layer(
        &self,
        g: &TemporalGraph,
        layer: usize,
        sg: &Subgraph<'_>,
        reprs: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        if layer >= self.config.layers {
            return Err(Error::InvalidArgument(format!("no layer {layer}")));
        }
        if reprs.len() != sg.nodes.len() {
            return Err(Error::DimensionMismatch {
                expected: sg.nodes.len(),
                got: reprs.len(),
            });
        }
        if let Some(r) = reprs.iter().find(|r| r.len() != self.config.hidden_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.config.hidden_dim,
                got: r.len(),
            });
        }
        let mut f = BatchForward::new(self, g, true);
        let prev: Vec<Option<Var>> = reprs.iter().map(|r| Some(f.tape.constant(r.clone()))).collect();
        let out: Vec<Var> = (0..sg.nodes.len()).map(|i| f.conv(layer, sg, i, &prev)).collect();
        Ok(out.into_iter().map(|v| f.tape.value(v).to_vec()).collect())
    }

    /// Unit-norm embedding of `v` as of `t`, with the degenerate fallback.
    pub fn embed_detailed(&self, g: &TemporalGraph, v: NodeRef, t: f64) -> Result<Embedded> {
        let mut f = BatchForward::new(self, g, false);
        let (var, degenerate) = f.embed(v, t, &self.inference_sampler())?;
        Ok(Embedded {
            vector: f.tape.value(var).to_vec(),
            degenerate,
        })
    }

    pub fn embed_node(&self, g: &TemporalGraph, v: NodeRef, t: f64) -> Result<Vec<f64>> {
        Ok(self.embed_detailed(g, v, t)?.vector)
    }

    /// Embeddings for many (node, time) pairs, sharing encoder work within
    /// chunks; results equal individually computed embeddings bit for bit.
    pub fn embed_many(&self, g: &TemporalGraph, items: &[(NodeRef, f64)]) -> Result<Vec<Embedded>> {
        const CHUNK: usize = 64;
        let spec = self.inference_sampler();
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(CHUNK) {
            let mut f = BatchForward::new(self, g, false);
            for &(v, t) in chunk {
                let (var, degenerate) = f.embed(v, t, &spec)?;
                out.push(Embedded {
                    vector: f.tape.value(var).to_vec(),
                    degenerate,
                });
            }
        }
        Ok(out)
    }

    pub fn score_pair(&self, g: &TemporalGraph, a: (NodeRef, f64), b: (NodeRef, f64)) -> Result<f64> {
        let ea = self.embed_node(g, a.0, a.1)?;
        let eb = self.embed_node(g, b.0, b.1)?;
        Ok(crate::linalg::dot(&ea, &eb))
    }

    /// Contrastive loss of `batch` under `spec`, with parameter gradients
    /// accumulated into `grads` when given. Also returns the rectifier sign
    /// signature of the forward pass.
    pub fn batch_loss(
        &self,
        g: &TemporalGraph,
        batch: &LossBatch,
        spec: &SamplerSpec,
        grads: Option<&mut Grads>,
    ) -> Result<(f64, u64)> {
        let mut f = BatchForward::new(self, g, true);
        let mut qv = Vec::with_capacity(batch.queries.len());
        for &(v, t) in &batch.queries {
            qv.push(f.embed(v, t, spec)?.0);
        }
        let mut cv = Vec::with_capacity(batch.candidates.len());
        for &(v, t) in &batch.candidates {
            cv.push(f.embed(v, t, spec)?.0);
        }
        let tape = &f.tape;
        let queries: Vec<&[f64]> = qv.iter().map(|&v| tape.value(v)).collect();
        let candidates: Vec<&[f64]> = cv.iter().map(|&v| tape.value(v)).collect();
        let out = infonce(&queries, &candidates, &batch.positive, self.config.temperature)?;
        if let Some(grads) = grads {
            let seeds: Vec<(Var, &[f64])> = qv
                .iter()
                .zip(&out.d_queries)
                .chain(cv.iter().zip(&out.d_candidates))
                .map(|(&v, d)| (v, d.as_slice()))
                .collect();
            tape.backward(&seeds, grads);
        }
        Ok((out.loss, tape.kink_signature()))
    }

    /// Compare analytic gradients with central differences on up to
    /// `per_group` random coordinates of each parameter group. Coordinates
    /// whose perturbation flips any rectifier are skipped, since the loss is
    /// not differentiable across that boundary.
    pub fn grad_check(
        &self,
        g: &TemporalGraph,
        batch: &LossBatch,
        per_group: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        const STEP: f64 = 1e-6;
        const FLOOR: f64 = 1e-5;
        let spec = self.config.sampler;
        let mut grads = self.params.zero_grads();
        let (_, base_sig) = self.batch_loss(g, batch, &spec, Some(&mut grads))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = GradCheckReport::default();
        for group in PARAM_GROUPS {
            let coords: Vec<(ParamId, usize)> = self
                .params
                .ids()
                .filter(|&id| group_of(self.params.name(id)) == group)
                .flat_map(|id| (0..self.params.get(id).len()).map(move |k| (id, k)))
                .collect();
            let mut order: Vec<usize> = (0..coords.len()).collect();
            order.shuffle(&mut rng);
            let mut gc = GroupCheck {
                group: group.to_string(),
                ..Default::default()
            };
            let mut probe = self.clone();
            for &c in &order {
                if gc.checked >= per_group {
                    break;
                }
                let (id, k) = coords[c];
                let orig = probe.params.get(id).data[k];
                probe.params.get_mut(id).data[k] = orig + STEP;
                let (lp, sp) = probe.batch_loss(g, batch, &spec, None)?;
                probe.params.get_mut(id).data[k] = orig - STEP;
                let (lm, sm) = probe.batch_loss(g, batch, &spec, None)?;
                probe.params.get_mut(id).data[k] = orig;
                if sp != base_sig || sm != base_sig {
                    gc.skipped_kinks += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * STEP);
                let analytic = grads.get(id)[k];
                let err = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                gc.max_rel_error = gc.max_rel_error.max(err);
                gc.checked += 1;
            }
            report.max_rel_error = report.max_rel_error.max(gc.max_rel_error);
            report.groups.push(gc);
        }
        Ok(report)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            shape: self.shape,
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for id in self.params.ids() {
            let t = self.params.get(id);
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for &x in &t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("not a graph model checkpoint (bad magic)".into()));
        }
        let word = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let version = word(take(4)?);
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = word(take(4)?);
        let header: CheckpointHeader = serde_json::from_slice(take(hlen)?)?;
        let mut model = GraphMatchModel::init(header.config, header.shape)?;
        let count = word(take(4)?);
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, configuration implies {}",
                model.params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let (rows, cols) = (word(take(4)?), word(take(4)?));
            let t = model.params.get_mut(id);
            if (rows, cols) != (t.rows, t.cols) {
                return Err(Error::Format(format!(
                    "tensor {} has shape {rows}x{cols}, expected {}x{}",
                    id.0, t.rows, t.cols
                )));
            }
            let raw = take(4 * rows * cols)?;
            for (x, c) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *x = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
        }
        if !model.params.all_finite() {
            return Err(Error::Format("checkpoint holds non-finite weights".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Short content hash used to identify a checkpoint.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_bytes());
        hex::encode(&digest[..8])
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    shape: InputShape,
}

fn sample_negatives(
    label: &TrainLabel,
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<(NodeRef, f64)> {
    let Some(cap) = cap.filter(|&c| c < label.negatives.len()) else {
        return label.negatives.clone();
    };
    let mut picks = rand::seq::index::sample(rng, label.negatives.len(), cap).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| label.negatives[i]).collect()
}

/// Fixed validation batches: each task's labels in order, cut into batches.
pub fn validation_batches(labels: &[TrainLabel], cfg: &TrainConfig) -> Vec<LossBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1);
    let mut out = Vec::new();
    for task in Task::ALL {
        let mine: Vec<&TrainLabel> = labels.iter().filter(|l| l.task == task).collect();
        for chunk in mine.chunks(cfg.batch_size.max(1)).take(cfg.val_batches) {
            let negs: Vec<_> = chunk
                .iter()
                .map(|l| sample_negatives(l, cfg.max_negatives_per_label, &mut rng))
                .collect();
            out.push(LossBatch::from_labels(chunk, &negs));
        }
    }
    out
}

fn validation_loss(model: &GraphMatchModel, g: &TemporalGraph, batches: &[LossBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Ok(f64::NAN);
    }
    let spec = model.config.sampler;
    let mut total = 0.0;
    for b in batches {
        total += model.batch_loss(g, b, &spec, None)?.0;
    }
    Ok(total / batches.len() as f64)
}

/// Train with task-homogeneous batches (task drawn 50/50 per step), Adam,
/// and a validation-loss evaluation at every checkpoint; returns the
/// checkpoint with the lowest validation loss. Checkpoints are held at
/// 32-bit precision, as written to disk.
pub fn train(
    model: GraphMatchModel,
    g: &TemporalGraph,
    train_labels: &[TrainLabel],
    val_labels: &[TrainLabel],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            model,
            checkpoints: Vec::new(),
            best_step: 0,
            step_losses: Vec::new(),
        });
    }
    if train_labels.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.checkpoint_every == 0 {
        return Err(Error::InvalidArgument(
            "batch_size and checkpoint_every must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pools: Vec<Vec<usize>> = Task::ALL
        .iter()
        .map(|&t| (0..train_labels.len()).filter(|&i| train_labels[i].task == t).collect())
        .collect();
    let mut cursor = [usize::MAX; 2];
    let val = validation_batches(val_labels, cfg);
    let spec = model.config.sampler;
    let mut model = model;
    let mut opt = Adam::new(&model.params, cfg.learning_rate, 0.9, 0.999);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, usize, GraphMatchModel)> = None;
    let mut since = Vec::new();
    for step in 1..=cfg.steps {
        let mut k = rng.random_range(0..2usize);
        if pools[k].is_empty() {
            k = 1 - k;
        }
        // walk a reshuffled permutation of the task's labels
        let mut chosen = Vec::with_capacity(cfg.batch_size);
        while chosen.len() < cfg.batch_size.min(pools[k].len()) {
            if cursor[k] >= pools[k].len() {
                pools[k].shuffle(&mut rng);
                cursor[k] = 0;
            }
            chosen.push(&train_labels[pools[k][cursor[k]]]);
            cursor[k] += 1;
        }
        let negs: Vec<_> = chosen
            .iter()
            .map(|l| sample_negatives(l, cfg.max_negatives_per_label, &mut rng))
            .collect();
        let batch = LossBatch::from_labels(&chosen, &negs);
        let mut grads = model.params.zero_grads();
        let (loss, _) = model.batch_loss(g, &batch, &spec, Some(&mut grads))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: step,
                detail: format!("loss {loss} on a {} batch of {} queries", Task::ALL[k], chosen.len()),
            });
        }
        opt.step(&mut model.params, &grads);
        if !model.params.all_finite() {
            return Err(Error::NonFiniteLoss {
                batch: step,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        step_losses.push(loss);
        since.push(loss);
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let mut snap = model.clone();
            snap.params.round_to_f32();
            let val_loss = validation_loss(&snap, g, &val)?;
            let meta = CheckpointMeta {
                step,
                train_loss: since.iter().sum::<f64>() / since.len() as f64,
                val_loss,
            };
            since.clear();
            if let Some(dir) = checkpoint_dir {
                write_checkpoint(dir, &snap, &meta)?;
            }
            let better = match &best {
                None => true,
                Some((b, _, _)) => val_loss < *b || (b.is_nan() && !val_loss.is_nan()),
            };
            if better {
                best = Some((val_loss, step, snap));
            }
            checkpoints.push(meta);
        }
    }
    let (_, best_step, best_model) = best.expect("at least one checkpoint");
    Ok(TrainOutcome {
        model: best_model,
        checkpoints,
        best_step,
        step_losses,
    })
}

fn write_checkpoint(dir: &Path, model: &GraphMatchModel, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(format!("step_{:06}.gmck", meta.step));
    model.save(&bin)?;
    let side = dir.join(format!("step_{:06}.json", meta.step));
    let mut f = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::to_writer_pretty(&mut f, meta)?;
    f.write_all(b"\n").map_err(|e| Error::io(&side, e))?;
    Ok(())
}
