//! Symmetric dual text encoder over bags of tokens, cosine scoring and the
//! temperature-scaled contrastive loss shared by both encoders.

use crate::autodiff::{Adam, Grads, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matvec_into, norm};
use crate::store::{FeatureLine, TemporalGraph};
use crate::types::Task;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TMDE";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenDoc {
    pub token_ids: Vec<u32>,
}

impl TokenDoc {
    pub fn new(token_ids: Vec<u32>) -> Self {
        TokenDoc { token_ids }
    }
}

const TABLE: ParamId = ParamId(0);
const TRANSFORM: ParamId = ParamId(1);
const BIAS: ParamId = ParamId(2);

/// Token table (`W x d`), output transform (`d x d`) and bias, shared by the
/// query and candidate sides.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderParams {
    params: ParamSet,
}

/// Intermediates of one forward pass, kept for the backward pass.
struct Encoded {
    out: Vec<f64>,
    pooled: Vec<f64>,
    norm: f64,
}

impl DualEncoderParams {
    pub fn init(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        // rows of roughly unit norm
        let limit = (3.0 / dim as f64).sqrt();
        let table = Tensor {
            rows: vocab,
            cols: dim,
            data: (0..vocab * dim).map(|_| rng.random_range(-limit..limit)).collect(),
        };
        params.add("token_table", table);
        params.add("output_transform", Tensor::glorot(dim, dim, &mut rng));
        params.add("output_bias", Tensor::zeros(dim, 1));
        DualEncoderParams { params }
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(TABLE).rows
    }

    pub fn dim(&self) -> usize {
        self.params.get(TABLE).cols
    }

    pub fn param_set(&self) -> &ParamSet {
        &self.params
    }

    pub fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Loss of one batch and its gradient with respect to every weight.
    pub fn batch_gradient(
        &self,
        batch: &TaskBatch<'_>,
        stage: Stage,
        cfg: &TextTrainConfig,
    ) -> Result<(f64, Grads)> {
        let mut grads = self.params.zero_grads();
        let loss = batch_step(self, batch, stage, cfg, &mut grads)?;
        Ok((loss, grads))
    }

    fn check(&self, doc: &TokenDoc) -> Result<()> {
        let w = self.vocab_size();
        match doc.token_ids.iter().find(|&&t| t as usize >= w) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab: w }),
            None => Ok(()),
        }
    }

    fn forward(&self, doc: &TokenDoc) -> Result<Encoded> {
        self.check(doc)?;
        let d = self.dim();
        if doc.token_ids.is_empty() {
            return Ok(Encoded {
                out: vec![0.0; d],
                pooled: vec![0.0; d],
                norm: 0.0,
            });
        }
        let table = &self.params.get(TABLE).data;
        let mut pooled = vec![0.0; d];
        // canonical summation order keeps the bag exactly order-free
        let mut sorted = doc.token_ids.clone();
        sorted.sort_unstable();
        for &t in &sorted {
            let t = t as usize;
            axpy(1.0, &table[t * d..(t + 1) * d], &mut pooled);
        }
        let inv = 1.0 / doc.token_ids.len() as f64;
        pooled.iter_mut().for_each(|x| *x *= inv);
        let mut y = vec![0.0; d];
        matvec_into(&self.params.get(TRANSFORM).data, &pooled, &mut y);
        axpy(1.0, &self.params.get(BIAS).data, &mut y);
        let n = norm(&y);
        if n == 0.0 {
            return Ok(Encoded {
                out: y,
                pooled,
                norm: 0.0,
            });
        }
        y.iter_mut().for_each(|x| *x /= n);
        Ok(Encoded {
            out: y,
            pooled,
            norm: n,
        })
    }

    /// Unit-norm embedding of `doc`; the empty document maps to zero.
    pub fn encode_text(&self, doc: &TokenDoc) -> Result<Vec<f64>> {
        Ok(self.forward(doc)?.out)
    }

    fn backward(&self, doc: &TokenDoc, enc: &Encoded, d_out: &[f64], grads: &mut Grads) {
        if enc.norm == 0.0 {
            return;
        }
        let d = self.dim();
        let proj = dot(&enc.out, d_out);
        let dy: Vec<f64> = d_out
            .iter()
            .zip(&enc.out)
            .map(|(g, o)| (g - o * proj) / enc.norm)
            .collect();
        axpy(1.0, &dy, &mut grads.tensors[BIAS.0 as usize]);
        let transform = &self.params.get(TRANSFORM).data;
        let mut d_pooled = vec![0.0; d];
        {
            let gt = &mut grads.tensors[TRANSFORM.0 as usize];
            for (r, &g) in dy.iter().enumerate() {
                axpy(g, &enc.pooled, &mut gt[r * d..(r + 1) * d]);
                axpy(g, &transform[r * d..(r + 1) * d], &mut d_pooled);
            }
        }
        let inv = 1.0 / doc.token_ids.len() as f64;
        let gtab = &mut grads.tensors[TABLE.0 as usize];
        for &t in &doc.token_ids {
            let t = t as usize;
            axpy(inv, &d_pooled, &mut gtab[t * d..(t + 1) * d]);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (w, d) = (self.vocab_size(), self.dim());
        let mut out = Vec::with_capacity(16 + 4 * (w * d + d * d + d));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for id in [TABLE, TRANSFORM, BIAS] {
            for &x in &self.params.get(id).data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a text encoder file (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported text encoder format version {version}")));
        }
        let (w, d) = (word(8) as usize, word(12) as usize);
        let expected = 16 + 4 * (w * d + d * d + d);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "text encoder file has {} bytes, expected {expected} for W={w}, d={d}",
                bytes.len()
            )));
        }
        let mut floats = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut take = |rows: usize, cols: usize| Tensor {
            rows,
            cols,
            data: floats.by_ref().take(rows * cols).collect(),
        };
        let mut params = ParamSet::new();
        params.add("token_table", take(w, d));
        params.add("output_transform", take(d, d));
        params.add("output_bias", take(d, 1));
        if !params.all_finite() {
            return Err(Error::Format("text encoder file holds non-finite weights".into()));
        }
        Ok(DualEncoderParams { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Cosine similarity; a zero vector on either side scores 0.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Loss and its gradient with respect to every query and candidate vector.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub d_queries: Vec<Vec<f64>>,
    pub d_candidates: Vec<Vec<f64>>,
}

/// Mean over queries of `-log softmax_j(q_i . c_j / tau)[positive[i]]`, the
/// softmax running over one shared candidate list.
pub fn infonce(
    queries: &[&[f64]],
    candidates: &[&[f64]],
    positive: &[usize],
    temperature: f64,
) -> Result<InfoNce> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("contrastive batch is empty".into()));
    }
    if positive.len() != queries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} queries but {} positive indices",
            queries.len(),
            positive.len()
        )));
    }
    if let Some(&p) = positive.iter().find(|&&p| p >= candidates.len()) {
        return Err(Error::InvalidArgument(format!(
            "positive index {p} outside {} candidates",
            candidates.len()
        )));
    }
    let dim = queries[0].len();
    for v in queries.iter().chain(candidates) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    let b = queries.len() as f64;
    let mut loss = 0.0;
    let mut d_queries = vec![vec![0.0; dim]; queries.len()];
    let mut d_candidates = vec![vec![0.0; dim]; candidates.len()];
    let mut logits = vec![0.0; candidates.len()];
    for (i, q) in queries.iter().enumerate() {
        for (j, c) in candidates.iter().enumerate() {
            logits[j] = dot(q, c) / temperature;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - logits[positive[i]];
        for (j, c) in candidates.iter().enumerate() {
            let p = (logits[j] - lse).exp();
            let g = (p - (j == positive[i]) as u8 as f64) / (temperature * b);
            if g != 0.0 {
                axpy(g, c, &mut d_queries[i]);
                axpy(g, q, &mut d_candidates[j]);
            }
        }
    }
    Ok(InfoNce {
        loss: (loss / b).max(0.0),
        d_queries,
        d_candidates,
    })
}

/// One task's queries with aligned positives and shared extra negatives.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub task: Task,
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub extra_negatives: Vec<Vec<f64>>,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub d_queries: Vec<Vec<f64>>,
    pub d_positives: Vec<Vec<f64>>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// Each query must pick its own positive out of every in-batch positive and
/// every extra negative.
pub fn infonce_loss(batch: &ContrastiveBatch) -> Result<BatchLoss> {
    if batch.queries.len() != batch.positives.len() {
        return Err(Error::InvalidArgument(format!(
            "{} queries but {} positives",
            batch.queries.len(),
            batch.positives.len()
        )));
    }
    let queries: Vec<&[f64]> = batch.queries.iter().map(Vec::as_slice).collect();
    let candidates: Vec<&[f64]> = batch
        .positives
        .iter()
        .chain(&batch.extra_negatives)
        .map(Vec::as_slice)
        .collect();
    let positive: Vec<usize> = (0..queries.len()).collect();
    let out = infonce(&queries, &candidates, &positive, batch.temperature)?;
    let mut d_candidates = out.d_candidates;
    let d_negatives = d_candidates.split_off(batch.positives.len());
    Ok(BatchLoss {
        loss: out.loss,
        d_queries: out.d_queries,
        d_positives: d_candidates,
        d_negatives,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Dense implicit signals, in-batch negatives only.
    Weak,
    /// Sparse explicit outcomes with attached hard negatives.
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub task: Task,
    pub query: TokenDoc,
    pub positive: TokenDoc,
    #[serde(default)]
    pub hard_negatives: Vec<TokenDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Hard negatives used per pair, at most.
    pub max_hard_negatives: usize,
}

impl Default for TextTrainConfig {
    fn default() -> Self {
        TextTrainConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-3,
            temperature: 0.05,
            seed: 0,
            max_hard_negatives: 4,
        }
    }
}

/// Pairs drawn from a single task.
#[derive(Debug)]
pub struct TaskBatch<'a> {
    pub task: Task,
    pub pairs: Vec<&'a TrainPair>,
}

impl<'a> TaskBatch<'a> {
    pub fn new(pairs: Vec<&'a TrainPair>) -> Result<Self> {
        let task = pairs
            .first()
            .ok_or_else(|| Error::InvalidArgument("batch holds no pairs".into()))?
            .task;
        if let Some(p) = pairs.iter().find(|p| p.task != task) {
            return Err(Error::MixedTask(format!(
                "batch mixes {task} with {}",
                p.task
            )));
        }
        Ok(TaskBatch { task, pairs })
    }
}

/// Shuffle within each task, cut into batches, then shuffle batch order.
pub fn task_batches<'a>(
    pairs: &'a [TrainPair],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TaskBatch<'a>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut batches = Vec::new();
    for task in Task::ALL {
        let mut idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].task == task).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks(batch_size) {
            batches.push(TaskBatch::new(chunk.iter().map(|&i| &pairs[i]).collect())?);
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Loss of one batch and its gradient accumulated into `grads`.
fn batch_step(
    p: &DualEncoderParams,
    batch: &TaskBatch<'_>,
    stage: Stage,
    cfg: &TextTrainConfig,
    grads: &mut Grads,
) -> Result<f64> {
    let mut negatives: Vec<&TokenDoc> = Vec::new();
    if stage == Stage::Strong {
        for pair in &batch.pairs {
            negatives.extend(pair.hard_negatives.iter().take(cfg.max_hard_negatives));
        }
    } else if batch.pairs.iter().any(|pair| !pair.hard_negatives.is_empty()) {
        return Err(Error::InvalidArgument(
            "weak-stage pairs must not carry hard negatives".into(),
        ));
    }
    let enc_q: Vec<Encoded> = batch
        .pairs
        .iter()
        .map(|pair| p.forward(&pair.query))
        .collect::<Result<_>>()?;
    let cand_docs: Vec<&TokenDoc> = batch
        .pairs
        .iter()
        .map(|pair| &pair.positive)
        .chain(negatives)
        .collect();
    let enc_c: Vec<Encoded> = cand_docs
        .iter()
        .map(|d| p.forward(d))
        .collect::<Result<_>>()?;
    let queries: Vec<&[f64]> = enc_q.iter().map(|e| e.out.as_slice()).collect();
    let candidates: Vec<&[f64]> = enc_c.iter().map(|e| e.out.as_slice()).collect();
    let positive: Vec<usize> = (0..queries.len()).collect();
    let out = infonce(&queries, &candidates, &positive, cfg.temperature)?;
    for (pair, (enc, d)) in batch.pairs.iter().zip(enc_q.iter().zip(&out.d_queries)) {
        p.backward(&pair.query, enc, d, grads);
    }
    for (doc, (enc, d)) in cand_docs.iter().zip(enc_c.iter().zip(&out.d_candidates)) {
        p.backward(doc, enc, d, grads);
    }
    Ok(out.loss)
}

/// Mini-batch contrastive training for `cfg.epochs` passes over `pairs`.
pub fn train_stage(
    mut p: DualEncoderParams,
    pairs: &[TrainPair],
    stage: Stage,
    cfg: &TextTrainConfig,
) -> Result<(DualEncoderParams, StageReport)> {
    let mut report = StageReport::default();
    if cfg.epochs == 0 || pairs.is_empty() {
        return Ok((p, report));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&p.params, cfg.learning_rate, 0.9, 0.999);
    for _ in 0..cfg.epochs {
        let batches = task_batches(pairs, cfg.batch_size, &mut rng)?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let mut grads = p.params.zero_grads();
            let loss = batch_step(&p, batch, stage, cfg, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: report.steps,
                    detail: format!("text encoder batch {b} of task {}", batch.task),
                });
            }
            total += loss;
            opt.step(&mut p.params, &grads);
            report.steps += 1;
        }
        report.epoch_losses.push(total / batches.len() as f64);
    }
    Ok((p, report))
}

/// Attach encoder outputs to every feature line: lines with a token list get
/// its embedding (zero for an empty list), lines without one keep no text.
pub fn embed_all_nodes(
    p: &DualEncoderParams,
    g: &TemporalGraph,
    lines: &[FeatureLine],
) -> Result<Vec<FeatureLine>> {
    let mut offenders = Vec::new();
    for l in lines {
        let v = l.node();
        match g.versions(v) {
            Ok(vs) if vs.iter().any(|x| x.timestamp == l.timestamp) => {}
            Ok(_) => offenders.push(format!("{v}@{}", l.timestamp)),
            Err(_) => offenders.push(format!("{v} (unknown node)")),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "raw texts reference missing node versions: {}",
            offenders.join(", ")
        )));
    }
    lines
        .iter()
        .map(|l| {
            let mut out = l.clone();
            if let Some(tokens) = &l.tokens {
                out.text_embedding = Some(p.encode_text(&TokenDoc::new(tokens.clone()))?);
            }
            Ok(out)
        })
        .collect()
}
