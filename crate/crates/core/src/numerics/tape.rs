//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes in reverse, pushing adjoints only through nodes that
//! depend on a trainable leaf, so frozen weights cost no gradient work.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    MulCol { a: usize, col: usize },
    Scale(usize, f64),
    Shift(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Sqrt(usize),
    Square(usize),
    SumAll(usize),
    SumCols(usize),
    Transpose(usize),
    Reshape(usize),
    SoftmaxXent { logits: usize, targets: Vec<usize>, probs: Tensor },
    Embedding { table: usize, ids: Vec<usize> },
    RmsNorm { a: usize, inv_rms: Vec<f64> },
    CausalAttention { q: usize, k: usize, v: usize, seq_len: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Operation record for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, kept only for trainable leaves.
#[derive(Debug)]
pub struct Grads {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, trainable: false });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape(v.idx));
        }
        Ok(v.idx)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true, trainable: true });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false, trainable: false });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    fn mm(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = gemm(self.val(ia), ta, self.val(ib), tb)?;
        Ok(self.push(out, Op::MatMul { a: ia, b: ib, ta, tb }, &[ia, ib]))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, false, b, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, true, b, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (self.val(ia), self.val(ib));
        if x.dims() != y.dims() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = x.zip_map(y, f)?;
        Ok(self.push(out, op(ia, ib), &[ia, ib]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    /// Adds a `[1 × c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a)?, self.check(row)?);
        let (r, c) = self.val(ia).dims();
        if self.val(ir).dims() != (1, c) {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.val(ia).shape(), self.val(ir).shape())));
        }
        let rv = self.val(ir).data();
        let mut out = self.val(ia).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rv[j];
            }
        }
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::AddRow { a: ia, row: ir }, &[ia, ir]))
    }

    /// Scales column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a)?, self.check(row)?);
        let (r, c) = self.val(ia).dims();
        if self.val(ir).dims() != (1, c) {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", self.val(ia).shape(), self.val(ir).shape())));
        }
        let rv = self.val(ir).data();
        let mut out = self.val(ia).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= rv[j];
            }
        }
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::MulRow { a: ia, row: ir }, &[ia, ir]))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ic) = (self.check(a)?, self.check(col)?);
        let (r, c) = self.val(ia).dims();
        if self.val(ic).dims() != (r, 1) {
            return Err(Error::shape("mul_col", format!("{:?} * {:?}", self.val(ia).shape(), self.val(ic).shape())));
        }
        let cv = self.val(ic).data();
        let mut out = self.val(ia).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= cv[i];
            }
        }
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::MulCol { a: ia, col: ic }, &[ia, ic]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(f);
        Ok(self.push(out, op(ia), &[ia]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).scale(s);
        Ok(self.push(out, Op::Scale(ia, s), &[ia]))
    }

    /// `a + s` elementwise.
    pub fn shift(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, move |x| x + s, Op::Shift)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    /// `x · σ(x)`
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).sum();
        Ok(self.push(Tensor::raw(vec![1, 1], vec![s]), Op::SumAll(ia), &[ia]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums: `[r × c] → [r × 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, _) = self.val(ia).dims();
        let out: Vec<f64> = (0..r).map(|i| self.val(ia).row_slice(i).iter().sum()).collect();
        Ok(self.push(Tensor::raw(vec![r, 1], out), Op::SumCols(ia), &[ia]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).transpose();
        Ok(self.push(out, Op::Transpose(ia), &[ia]))
    }

    /// Row-major reshape to `[rows × cols]`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).clone().reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(ia), &[ia]))
    }

    /// Mean softmax cross-entropy of `logits [n × V]` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (n, v) = self.val(il).dims();
        if targets.len() != n {
            return Err(Error::shape("softmax_xent", format!("{n} rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::LabelOutOfRange { label: bad, classes: v });
        }
        let x = self.val(il);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            let row = x.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - m).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[i * v + j] /= z;
            }
            loss += z.ln() + m - row[targets[i]];
        }
        let out = Tensor::raw(vec![1, 1], vec![loss / n as f64]);
        let probs = Tensor::raw(vec![n, v], probs);
        Ok(self.push(out, Op::SoftmaxXent { logits: il, targets: targets.to_vec(), probs }, &[il]))
    }

    /// Row gather: `out[t] = table[ids[t]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let (vocab, d) = self.val(it).dims();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfVocab { token: id, vocab });
            }
            out.extend_from_slice(self.val(it).row_slice(id));
        }
        let value = Tensor::raw(vec![ids.len(), d], out);
        Ok(self.push(value, Op::Embedding { table: it, ids: ids.to_vec() }, &[it]))
    }

    /// Parameter-free RMS normalization of each row.
    pub fn rms_norm(&mut self, a: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let ia = self.check(a)?;
        let (r, c) = self.val(ia).dims();
        let x = self.val(ia).data();
        let mut out = vec![0.0; r * c];
        let mut inv = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let s = 1.0 / (ms + EPS).sqrt();
            inv[i] = s;
            for j in 0..c {
                out[i * c + j] = row[j] * s;
            }
        }
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::RmsNorm { a: ia, inv_rms: inv }, &[ia]))
    }

    /// Single-head causal self-attention over consecutive blocks of
    /// `seq_len` rows (one block per sequence).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (n, d) = self.val(iq).dims();
        if self.val(ik).dims() != (n, d) || self.val(iv).dims() != (n, d) || seq_len == 0 || n % seq_len != 0 {
            return Err(Error::shape("causal_attention", format!("{n} rows, d={d}, seq_len={seq_len}")));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.val(iq).data(), self.val(ik).data(), self.val(iv).data());
        let t = seq_len;
        let mut probs = vec![0.0; (n / t) * t * t];
        let mut out = vec![0.0; n * d];
        for s in 0..n / t {
            let base = s * t;
            for i in 0..t {
                let qi = &qv[(base + i) * d..(base + i + 1) * d];
                let p = &mut probs[s * t * t + i * t..s * t * t + (i + 1) * t];
                let mut m = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kv[(base + j) * d..(base + j + 1) * d];
                    p[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    m = m.max(p[j]);
                }
                let mut z = 0.0;
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - m).exp();
                    z += *pj;
                }
                let o = &mut out[(base + i) * d..(base + i + 1) * d];
                for j in 0..=i {
                    p[j] /= z;
                    let vj = &vv[(base + j) * d..(base + j + 1) * d];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += p[j] * vc;
                    }
                }
            }
        }
        let value = Tensor::raw(vec![n, d], out);
        Ok(self.push(value, Op::CausalAttention { q: iq, k: ik, v: iv, seq_len, probs }, &[iq, ik, iv]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let il = self.check(loss)?;
        let lv = self.val(il);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::raw(lv.shape().to_vec(), vec![1.0]));
        for idx in (0..=il).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if node.trainable {
                grads[idx] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.trainable {
                grads[i] = None;
            }
        }
        Ok(Grads { tape: self.id, grads })
    }

    /// Gradients of `loss` with respect to each of `params`, in order.
    /// Parameters that do not influence the loss get zero gradients.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        for &p in params {
            self.check(p)?;
        }
        let mut g = self.backward(loss)?;
        Ok(params
            .iter()
            .map(|&p| {
                g.take(p).unwrap_or_else(|| {
                    let v = self.value(p);
                    Tensor::raw(v.shape().to_vec(), vec![0.0; v.len()])
                })
            })
            .collect())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |i: usize| self.nodes[i].requires_grad;
        let send = |grads: &mut [Option<Tensor>], i: usize, t: Tensor| match &mut grads[i] {
            Some(acc) => acc.accumulate(&t),
            slot @ None => *slot = Some(t),
        };
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.val(a), self.val(b));
                if needs(a) {
                    let da = match (ta, tb) {
                        (false, false) => gemm(g, false, bv, true),
                        (false, true) => gemm(g, false, bv, false),
                        (true, false) => gemm(bv, false, g, true),
                        (true, true) => gemm(bv, true, g, true),
                    }
                    .expect("matmul backward shapes");
                    send(grads, a, da);
                }
                if needs(b) {
                    let db = match (ta, tb) {
                        (false, false) => gemm(av, true, g, false),
                        (false, true) => gemm(g, true, av, false),
                        (true, false) => gemm(av, false, g, false),
                        (true, true) => gemm(g, true, av, true),
                    }
                    .expect("matmul backward shapes");
                    send(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    send(grads, a, g.clone());
                }
                if needs(b) {
                    send(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    send(grads, a, g.clone());
                }
                if needs(b) {
                    send(grads, b, g.scale(-1.0));
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    send(grads, a, g.zip_map(self.val(b), |g, y| g * y).unwrap());
                }
                if needs(b) {
                    send(grads, b, g.zip_map(self.val(a), |g, x| g * x).unwrap());
                }
            }
            &Op::Div(a, b) => {
                let bv = self.val(b);
                if needs(a) {
                    send(grads, a, g.zip_map(bv, |g, y| g / y).unwrap());
                }
                if needs(b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = g.zip_map(out, |g, o| g * o).unwrap().zip_map(bv, |go, y| -go / y).unwrap();
                    send(grads, b, t);
                }
            }
            &Op::AddRow { a, row } => {
                if needs(a) {
                    send(grads, a, g.clone());
                }
                if needs(row) {
                    send(grads, row, col_sums(g));
                }
            }
            &Op::MulRow { a, row } => {
                let (r, c) = g.dims();
                if needs(a) {
                    let rv = self.val(row).data();
                    send(grads, a, Tensor::from_fn(r, c, |i, j| g.at(i, j) * rv[j]));
                }
                if needs(row) {
                    let prod = g.zip_map(self.val(a), |g, x| g * x).unwrap();
                    send(grads, row, col_sums(&prod));
                }
            }
            &Op::MulCol { a, col } => {
                let (r, c) = g.dims();
                if needs(a) {
                    let cv = self.val(col).data();
                    send(grads, a, Tensor::from_fn(r, c, |i, j| g.at(i, j) * cv[i]));
                }
                if needs(col) {
                    let av = self.val(a);
                    let d: Vec<f64> = (0..r).map(|i| (0..c).map(|j| g.at(i, j) * av.at(i, j)).sum()).collect();
                    send(grads, col, Tensor::raw(vec![r, 1], d));
                }
            }
            &Op::Scale(a, s) => send(grads, a, g.scale(s)),
            &Op::Shift(a) => send(grads, a, g.clone()),
            &Op::Tanh(a) => send(grads, a, g.zip_map(out, |g, y| g * (1.0 - y * y)).unwrap()),
            &Op::Sigmoid(a) => send(grads, a, g.zip_map(out, |g, y| g * y * (1.0 - y)).unwrap()),
            &Op::Exp(a) => send(grads, a, g.zip_map(out, |g, y| g * y).unwrap()),
            &Op::Sqrt(a) => send(grads, a, g.zip_map(out, |g, y| g / (2.0 * y)).unwrap()),
            &Op::Square(a) => send(grads, a, g.zip_map(self.val(a), |g, x| 2.0 * g * x).unwrap()),
            &Op::SumAll(a) => {
                let av = self.val(a);
                send(grads, a, Tensor::raw(av.shape().to_vec(), vec![g.data()[0]; av.len()]));
            }
            &Op::SumCols(a) => {
                let (r, c) = self.val(a).dims();
                send(grads, a, Tensor::from_fn(r, c, |i, _| g.data()[i]));
            }
            &Op::Transpose(a) => send(grads, a, g.transpose()),
            &Op::Reshape(a) => {
                let (r, c) = self.val(a).dims();
                send(grads, a, g.clone().reshape(r, c).expect("reshape backward"));
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let (n, v) = probs.dims();
                let s = g.data()[0] / n as f64;
                let mut d = probs.data().to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * v + t] -= 1.0;
                }
                for x in &mut d {
                    *x *= s;
                }
                send(grads, *logits, Tensor::raw(vec![n, v], d));
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.val(*table).dims();
                let mut dt = vec![0.0; vocab * d];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[t * d + j];
                    }
                }
                send(grads, *table, Tensor::raw(vec![vocab, d], dt));
            }
            Op::RmsNorm { a, inv_rms } => {
                let x = self.val(*a);
                let (r, c) = x.dims();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let s = inv_rms[i];
                    let xr = x.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let k = s * s * s * dot / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = s * gr[j] - k * xr[j];
                    }
                }
                send(grads, *a, Tensor::raw(vec![r, c], dx));
            }
            Op::CausalAttention { q, k, v, seq_len, probs } => {
                let (q, k, v, t) = (*q, *k, *v, *seq_len);
                let (n, d) = self.val(q).dims();
                let scale = 1.0 / (d as f64).sqrt();
                let (qv, kv, vv) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
                let gd = g.data();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; t];
                for s in 0..n / t {
                    let base = s * t;
                    for i in 0..t {
                        let p = &probs[s * t * t + i * t..s * t * t + (i + 1) * t];
                        let go = &gd[(base + i) * d..(base + i + 1) * d];
                        let mut inner = 0.0;
                        for j in 0..=i {
                            let vj = &vv[(base + j) * d..(base + j + 1) * d];
                            dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            inner += p[j] * dp[j];
                            let dvj = &mut dv[(base + j) * d..(base + j + 1) * d];
                            for (x, y) in dvj.iter_mut().zip(go) {
                                *x += p[j] * y;
                            }
                        }
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                dq[(base + i) * d + c] += ds * kv[(base + j) * d + c];
                                dk[(base + j) * d + c] += ds * qv[(base + i) * d + c];
                            }
                        }
                    }
                }
                if needs(q) {
                    send(grads, q, Tensor::raw(vec![n, d], dq));
                }
                if needs(k) {
                    send(grads, k, Tensor::raw(vec![n, d], dk));
                }
                if needs(v) {
                    send(grads, v, Tensor::raw(vec![n, d], dv));
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let (r, c) = g.dims();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(g.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::raw(vec![1, c], out)
}
