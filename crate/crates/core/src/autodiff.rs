//! Vector-granularity reverse-mode differentiation.
//!
//! A [`Tape`] records operations on dense vectors whose weights live in a
//! [`ParamSet`]. Matrix-vector products are memoized on (weight, input) so a
//! node representation shared by many subgraphs in one batch is transformed
//! once and receives the sum of every consumer's adjoint.

use crate::linalg::{axpy, dot, matvec_into};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Self {
        if limit <= 0.0 {
            return Self::zeros(rows, cols);
        }
        Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect(),
        }
    }

    /// Uniform Glorot initialization.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Tensor {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() as u32 - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0 as usize]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len() as u32).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Round every entry through `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0 as usize]
    }

    fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0 as usize]
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= c;
            }
        }
    }
}

/// Adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: params.zero_grads().tensors,
            v: params.zero_grads().tensors,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, t) in params.tensors.iter_mut().enumerate() {
            let g = &grads.tensors[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..t.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                t.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatVec { w: ParamId, x: Var },
    AddParam { x: Var, b: ParamId },
    Param { p: ParamId },
    Add { a: Var, b: Var },
    Sum { xs: Vec<Var> },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    /// `sum_u softmax_u(a . leaky(q + k_u)) * k_u`
    Attend {
        query: Var,
        keys: Vec<Var>,
        a: ParamId,
        slope: f64,
        weights: Vec<f64>,
    },
    Normalize { x: Var, norm: f64 },
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
    matvec_memo: HashMap<(ParamId, Var), Var>,
    kinks: u64,
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            values: Vec::new(),
            ops: Vec::new(),
            matvec_memo: HashMap::new(),
            kinks: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.index()]
    }

    /// Hash of every rectifier's active/inactive pattern seen so far. Two
    /// forward passes with equal signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn note_sign(&mut self, positive: bool) {
        self.kinks ^= positive as u64;
        self.kinks = self.kinks.wrapping_mul(0x1000_0000_01b3);
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() as u32 - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, p: ParamId) -> Var {
        let value = self.params.get(p).data.clone();
        self.push(Op::Param { p }, value)
    }

    /// `W x`, computed once per (W, x) on this tape.
    pub fn matvec(&mut self, w: ParamId, x: Var) -> Var {
        if let Some(&v) = self.matvec_memo.get(&(w, x)) {
            return v;
        }
        let t = self.params.get(w);
        debug_assert_eq!(t.cols, self.values[x.index()].len(), "{}", self.params.name(w));
        let mut y = vec![0.0; t.rows];
        matvec_into(&t.data, &self.values[x.index()], &mut y);
        let v = self.push(Op::MatVec { w, x }, y);
        self.matvec_memo.insert((w, x), v);
        v
    }

    pub fn add_param(&mut self, x: Var, b: ParamId) -> Var {
        let bias = &self.params.get(b).data;
        let y = self.values[x.index()]
            .iter()
            .zip(bias)
            .map(|(a, b)| a + b)
            .collect();
        self.push(Op::AddParam { x, b }, y)
    }

    /// `W x + b`
    pub fn affine(&mut self, w: ParamId, b: ParamId, x: Var) -> Var {
        let h = self.matvec(w, x);
        self.add_param(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.values[a.index()]
            .iter()
            .zip(&self.values[b.index()])
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add { a, b }, y)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum of no vectors");
        let mut y = self.values[xs[0].index()].clone();
        for x in &xs[1..] {
            for (acc, v) in y.iter_mut().zip(&self.values[x.index()]) {
                *acc += v;
            }
        }
        self.push(Op::Sum { xs: xs.to_vec() }, y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.values[x.index()].iter().map(|v| v * c).collect();
        self.push(Op::Scale { x, c }, y)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        if xs.len() == 1 {
            return xs[0];
        }
        let s = self.sum(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.values[x.index()].iter().map(|&v| v.max(0.0)).collect();
        for i in 0..y.len() {
            let pos = self.values[x.index()][i] > 0.0;
            self.note_sign(pos);
        }
        self.push(Op::Relu { x }, y)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y: Vec<f64> = self.values[x.index()]
            .iter()
            .map(|&v| leaky(v, slope))
            .collect();
        for i in 0..y.len() {
            let pos = self.values[x.index()][i] > 0.0;
            self.note_sign(pos);
        }
        self.push(Op::LeakyRelu { x, slope }, y)
    }

    /// Additive attention over `keys`: scores `a . leaky(query + key)`,
    /// softmax-normalized, weighting the keys themselves.
    pub fn attend(&mut self, query: Var, keys: &[Var], a: ParamId, slope: f64) -> Var {
        assert!(!keys.is_empty(), "attention over no keys");
        let av = &self.params.get(a).data;
        let q = &self.values[query.index()];
        let mut scores = Vec::with_capacity(keys.len());
        let mut signs = Vec::new();
        for k in keys {
            let kv = &self.values[k.index()];
            let mut s = 0.0;
            for i in 0..q.len() {
                let pre = q[i] + kv[i];
                signs.push(pre > 0.0);
                s += av[i] * leaky(pre, slope);
            }
            scores.push(s);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= z;
        }
        let mut y = vec![0.0; q.len()];
        for (k, &w) in keys.iter().zip(&weights) {
            axpy(w, &self.values[k.index()], &mut y);
        }
        for s in signs {
            self.note_sign(s);
        }
        self.push(
            Op::Attend {
                query,
                keys: keys.to_vec(),
                a,
                slope,
                weights,
            },
            y,
        )
    }

    /// `x / ||x||`. Callers check the norm beforehand; a zero input yields
    /// non-finite output.
    pub fn normalize(&mut self, x: Var) -> Var {
        let xv = &self.values[x.index()];
        let n = dot(xv, xv).sqrt();
        let y = xv.iter().map(|v| v / n).collect();
        self.push(Op::Normalize { x, norm: n }, y)
    }

    /// Accumulate parameter gradients for the scalar whose gradient with
    /// respect to each seeded variable is given.
    pub fn backward(&self, seeds: &[(Var, &[f64])], grads: &mut Grads) {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        let values = &self.values;
        fn slot<'a>(
            adj: &'a mut [Option<Vec<f64>>],
            values: &[Vec<f64>],
            v: Var,
        ) -> &'a mut Vec<f64> {
            adj[v.index()].get_or_insert_with(|| vec![0.0; values[v.index()].len()])
        }
        for (v, g) in seeds {
            axpy(1.0, g, slot(&mut adj, values, *v));
        }
        for i in (0..self.ops.len()).rev() {
            let Some(dy) = adj[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Param { p } => axpy(1.0, &dy, grads.get_mut(*p)),
                Op::MatVec { w, x } => {
                    let t = self.params.get(*w);
                    let xv = &values[x.index()];
                    let gw = grads.get_mut(*w);
                    for (r, &d) in dy.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, xv, &mut gw[r * t.cols..(r + 1) * t.cols]);
                        }
                    }
                    let dx = slot(&mut adj, values, *x);
                    for (r, &d) in dy.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, &t.data[r * t.cols..(r + 1) * t.cols], dx);
                        }
                    }
                }
                Op::AddParam { x, b } => {
                    axpy(1.0, &dy, grads.get_mut(*b));
                    axpy(1.0, &dy, slot(&mut adj, values, *x));
                }
                Op::Add { a, b } => {
                    axpy(1.0, &dy, slot(&mut adj, values, *a));
                    axpy(1.0, &dy, slot(&mut adj, values, *b));
                }
                Op::Sum { xs } => {
                    for x in xs {
                        axpy(1.0, &dy, slot(&mut adj, values, *x));
                    }
                }
                Op::Scale { x, c } => axpy(*c, &dy, slot(&mut adj, values, *x)),
                Op::Relu { x } => {
                    let xv = &values[x.index()];
                    let dx = slot(&mut adj, values, *x);
                    for j in 0..dy.len() {
                        if xv[j] > 0.0 {
                            dx[j] += dy[j];
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &values[x.index()];
                    let dx = slot(&mut adj, values, *x);
                    for j in 0..dy.len() {
                        dx[j] += if xv[j] > 0.0 { dy[j] } else { slope * dy[j] };
                    }
                }
                Op::Attend {
                    query,
                    keys,
                    a,
                    slope,
                    weights,
                } => {
                    let av = &self.params.get(*a).data;
                    let q = values[query.index()].clone();
                    let dalpha: Vec<f64> = keys
                        .iter()
                        .map(|k| dot(&dy, &values[k.index()]))
                        .collect();
                    let mean: f64 = weights.iter().zip(&dalpha).map(|(w, d)| w * d).sum();
                    let mut dq = vec![0.0; q.len()];
                    let mut da = vec![0.0; q.len()];
                    for (u, k) in keys.iter().enumerate() {
                        let de = weights[u] * (dalpha[u] - mean);
                        let kv = values[k.index()].clone();
                        let dk = slot(&mut adj, values, *k);
                        axpy(weights[u], &dy, dk);
                        for j in 0..q.len() {
                            let pre = q[j] + kv[j];
                            da[j] += de * leaky(pre, *slope);
                            let dpre = de * av[j] * if pre > 0.0 { 1.0 } else { *slope };
                            dk[j] += dpre;
                            dq[j] += dpre;
                        }
                    }
                    axpy(1.0, &da, grads.get_mut(*a));
                    axpy(1.0, &dq, slot(&mut adj, values, *query));
                }
                Op::Normalize { x, norm } => {
                    let y = &values[i];
                    let proj = dot(y, &dy);
                    let dx = slot(&mut adj, values, *x);
                    for j in 0..dy.len() {
                        dx[j] += (dy[j] - y[j] * proj) / norm;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar objective `c . f(x)` over a small composite graph.
    fn objective(ps: &ParamSet, ids: &[ParamId], c: &[f64]) -> (f64, Grads) {
        let mut tape = Tape::new(ps);
        let x = tape.constant(vec![0.3, -0.7, 0.2]);
        let h = tape.affine(ids[0], ids[1], x);
        let h = tape.relu(h);
        let k1 = tape.matvec(ids[2], h);
        let k2 = tape.matvec(ids[2], x);
        let q = tape.matvec(ids[3], h);
        let att = tape.attend(q, &[k1, k2], ids[4], 0.2);
        let s = tape.sum(&[att, k1]);
        let m = tape.mean(&[s, k2]);
        let l = tape.leaky_relu(m, 0.1);
        let out = tape.normalize(l);
        let val = dot(tape.value(out), c);
        let mut g = ps.zero_grads();
        tape.backward(&[(out, c)], &mut g);
        (val, g)
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let ids = vec![
            ps.add("w", Tensor::glorot(3, 3, &mut rng)),
            ps.add("b", Tensor::glorot(3, 1, &mut rng)),
            ps.add("k", Tensor::glorot(3, 3, &mut rng)),
            ps.add("q", Tensor::glorot(3, 3, &mut rng)),
            ps.add("a", Tensor::glorot(3, 1, &mut rng)),
        ];
        let c = [0.5, -1.0, 2.0];
        let (_, g) = objective(&ps, &ids, &c);
        let h = 1e-6;
        for &id in &ids {
            for i in 0..ps.get(id).len() {
                let mut p = ps.clone();
                p.get_mut(id).data[i] += h;
                let (fp, _) = objective(&p, &ids, &c);
                p.get_mut(id).data[i] -= 2.0 * h;
                let (fm, _) = objective(&p, &ids, &c);
                let num = (fp - fm) / (2.0 * h);
                let ana = g.get(id)[i];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + ana.abs()),
                    "{}[{i}]: {num} vs {ana}",
                    ps.name(id)
                );
            }
        }
    }

    #[test]
    fn matvec_is_memoized() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::zeros(2, 2));
        let mut tape = Tape::new(&ps);
        let x = tape.constant(vec![1.0, 2.0]);
        let a = tape.matvec(w, x);
        let b = tape.matvec(w, x);
        assert_eq!(a, b);
        assert_eq!(tape.len(), 2);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut ps = ParamSet::new();
        let p = ps.add("p", Tensor { rows: 2, cols: 1, data: vec![1.0, -1.0] });
        let mut opt = Adam::new(&ps, 0.1, 0.9, 0.999);
        let mut g = ps.zero_grads();
        g.tensors[0] = vec![1.0, -1.0];
        opt.step(&mut ps, &g);
        let d = &ps.get(p).data;
        assert!(d[0] < 1.0 && d[1] > -1.0);
    }
}
