//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied to its variables. Leaves are
//! either *tracked* (created with [`Graph::param`]) or *constant* (created
//! with [`Graph::constant`]); a node needs a gradient only if some tracked
//! leaf feeds it, so frozen weights and reference branches cost nothing in
//! the backward pass and never receive gradients.
//!
//! Ops are deliberately coarse (fused attention, layer norm, KL, TopK) so a
//! transformer forward is a few dozen nodes rather than millions of scalars.
//!
//! ```
//! use saewb_core::autodiff::Graph;
//! use saewb_core::tensor::Matrix;
//!
//! let mut g = Graph::new();
//! let x = g.param(Matrix::row_vector(&[1.0, 2.0, 3.0]));
//! let loss = g.sum_all(x);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{gemm, gemm_strided, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("backward was already called on this recording")]
    BackwardTwice,
    #[error("backward needs a scalar (1x1) loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Argument order of the KL term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `D_KL(P_ref ‖ P_model)`: the reference distribution weights the log ratio.
    #[default]
    RefToModel,
    /// `D_KL(P_model ‖ P_ref)`.
    ModelToRef,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, s: f64 },
    Relu { a: Var },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
    Kl { logits: Var, reference: Matrix, direction: KlDirection },
    TopK { a: Var, mask: Vec<bool> },
    MeanSqDiff { a: Var, b: Var },
    WeightedL1 { h: Var, w_dec: Var },
    L1 { h: Var },
    SumAll { a: Var },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the tracked leaves of a graph.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Matrix>,
}

impl Gradients {
    /// `None` when `var` is not a tracked leaf or did not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A tracked leaf: gradients are reported for it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let value = self.value(a).matmul(self.value(b), trans_b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, trans_b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub { a, b }, ng)
    }

    /// Adds a `(1, n)` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a).add_row(self.value(bias));
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddRow { a, bias }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale { a, s }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu { a }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu { a }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), cols, "layer norm gain width");
        assert_eq!(bv.len(), cols, "layer norm bias width");
        let mut out = Matrix::zeros(rows, cols);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mu) * rs * gv[c] + bv[c];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            ng,
        )
    }

    /// Causal multi-head self-attention over a packed `(batch·seq, 3·d)`
    /// buffer laid out as `[q | k | v]`, heads contiguous inside each block.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        let (rows, width) = qv.shape();
        assert_eq!(rows, batch * seq, "attention rows != batch*seq");
        assert_eq!(width % 3, 0, "attention input must pack q, k and v");
        let d = width / 3;
        assert_eq!(d % heads, 0, "model width not divisible by heads");
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Matrix::zeros(rows, d);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let src = qv.data();
        let w3 = width as isize;
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let q_off = b * seq * width + h * hd;
                let k_off = q_off + d;
                let v_off = q_off + 2 * d;
                gemm_strided(
                    seq, hd, seq, scale,
                    &src[q_off..], w3, 1,
                    &src[k_off..], 1, w3,
                    0.0, p, seq as isize, 1,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let m = row[..=i].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let mut z = 0.0;
                    for v in row[..=i].iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in row[..=i].iter_mut() {
                        *v /= z;
                    }
                    for v in row[i + 1..].iter_mut() {
                        *v = 0.0;
                    }
                }
                let o_off = b * seq * d + h * hd;
                gemm_strided(
                    seq, seq, hd, 1.0,
                    p, seq as isize, 1,
                    &src[v_off..], w3, 1,
                    0.0, &mut out.data_mut()[o_off..], d as isize, 1,
                );
            }
        }
        let ng = self.ng(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut out = Matrix::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows(), "embedding index {id} out of range {}", tv.rows());
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Mean next-token cross-entropy over rows that carry a target.
    ///
    /// Panics if no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per logit row");
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lv.row(r);
                assert!(t < row.len(), "target {t} out of vocabulary");
                total += log_sum_exp(row) - row[t];
                count += 1;
            }
        }
        assert!(count > 0, "cross entropy over zero positions");
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
            },
            ng,
        )
    }

    /// Mean per-row KL divergence between a constant reference distribution
    /// (given as log-probabilities) and `softmax(logits)`.
    pub fn kl_divergence(&mut self, reference_logp: Matrix, logits: Var, direction: KlDirection) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), reference_logp.shape(), "KL operands differ in shape");
        let rows = lv.rows();
        let mut logq = vec![0.0; lv.cols()];
        let mut total = 0.0;
        for r in 0..rows {
            log_softmax_into(lv.row(r), &mut logq);
            total += kl_row(reference_logp.row(r), &logq, direction);
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(total / rows.max(1) as f64),
            Op::Kl {
                logits,
                reference: reference_logp,
                direction,
            },
            ng,
        )
    }

    /// Keeps the `k` largest entries of each row (lowest index wins ties) and
    /// zeroes the rest. With `allowed`, only those columns are candidates and
    /// at most `min(k, #allowed)` entries survive.
    pub fn topk(&mut self, a: Var, k: usize, allowed: Option<&[bool]>) -> Var {
        let av = self.value(a);
        let mask = topk_mask(av, k, allowed);
        let mut out = av.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::TopK { a, mask }, ng)
    }

    /// `(1/rows) · Σ (a − b)²`: squared error summed over columns, averaged over rows.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse operands differ in shape");
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rows = av.rows().max(1) as f64;
        let ng = self.ng(a) || self.ng(b);
        self.push(Matrix::scalar(s / rows), Op::MeanSqDiff { a, b }, ng)
    }

    /// `(1/rows) · Σ_r Σ_i h_ri · ‖w_i‖₁` with `w_i` the i-th column of `w_dec`.
    pub fn weighted_l1(&mut self, h: Var, w_dec: Var) -> Var {
        let hv = self.value(h);
        let norms = column_l1_norms(self.value(w_dec));
        assert_eq!(hv.cols(), norms.len(), "latent width != decoder columns");
        let mut s = 0.0;
        for r in 0..hv.rows() {
            s += hv.row(r).iter().zip(&norms).map(|(a, n)| a * n).sum::<f64>();
        }
        let rows = hv.rows().max(1) as f64;
        let ng = self.ng(h) || self.ng(w_dec);
        self.push(Matrix::scalar(s / rows), Op::WeightedL1 { h, w_dec }, ng)
    }

    /// `(1/rows) · Σ |h|`.
    pub fn l1(&mut self, h: Var) -> Var {
        let hv = self.value(h);
        let s: f64 = hv.data().iter().map(|v| v.abs()).sum();
        let rows = hv.rows().max(1) as f64;
        let ng = self.ng(h);
        self.push(Matrix::scalar(s / rows), Op::L1 { h }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Matrix::scalar(s), Op::SumAll { a }, ng)
    }

    /// Back-propagates from the scalar `loss`. A recording can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, GraphError> {
        if self.consumed {
            return Err(GraphError::BackwardTwice);
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(GraphError::NonScalarLoss(shape.0, shape.1));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(i), g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                if wants(*a) {
                    let buf = slot(grads, *a, val(*a).shape());
                    // dA = G · op(B)ᵀ
                    gemm(g, false, val(*b), !*trans_b, buf, 1.0, 1.0);
                }
                if wants(*b) {
                    let buf = slot(grads, *b, val(*b).shape());
                    if *trans_b {
                        gemm(g, true, val(*a), false, buf, 1.0, 1.0);
                    } else {
                        gemm(val(*a), true, g, false, buf, 1.0, 1.0);
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if wants(*b) {
                    slot(grads, *b, g.shape()).add_assign(g);
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if wants(*b) {
                    let buf = slot(grads, *b, g.shape());
                    for (o, v) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if wants(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if wants(*bias) {
                    let s = g.sum_rows();
                    slot(grads, *bias, s.shape()).add_assign(&s);
                }
            }
            Op::Scale { a, s } => {
                if wants(*a) {
                    let buf = slot(grads, *a, g.shape());
                    for (o, v) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o += s * v;
                    }
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let x = val(*a);
                    let buf = slot(grads, *a, g.shape());
                    for ((o, gv), xv) in buf.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let x = val(*a);
                    let buf = slot(grads, *a, g.shape());
                    for ((o, gv), xv) in buf.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += gv * gelu_grad(*xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => self.backprop_layer_norm(*x, *gamma, *beta, mean, rstd, g, grads),
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                if wants(*qkv) {
                    let src = val(*qkv);
                    let buf = slot(grads, *qkv, src.shape());
                    attention_backward(src, probs, *batch, *seq, *heads, g, buf);
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let buf = slot(grads, *table, val(*table).shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in buf.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                count,
            } => {
                if wants(*logits) {
                    let lv = val(*logits);
                    let scale = g.as_scalar() / *count as f64;
                    let buf = slot(grads, *logits, lv.shape());
                    let mut p = vec![0.0; lv.cols()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        log_softmax_into(lv.row(r), &mut p);
                        let row = buf.row_mut(r);
                        for (c, o) in row.iter_mut().enumerate() {
                            let mut d = p[c].exp();
                            if c == t {
                                d -= 1.0;
                            }
                            *o += scale * d;
                        }
                    }
                }
            }
            Op::Kl {
                logits,
                reference,
                direction,
            } => {
                if wants(*logits) {
                    let lv = val(*logits);
                    let scale = g.as_scalar() / lv.rows().max(1) as f64;
                    let buf = slot(grads, *logits, lv.shape());
                    let mut logq = vec![0.0; lv.cols()];
                    for r in 0..lv.rows() {
                        log_softmax_into(lv.row(r), &mut logq);
                        let logp = reference.row(r);
                        let row = buf.row_mut(r);
                        match direction {
                            KlDirection::RefToModel => {
                                for c in 0..row.len() {
                                    row[c] += scale * (logq[c].exp() - logp[c].exp());
                                }
                            }
                            KlDirection::ModelToRef => {
                                let kl = kl_row(logp, &logq, *direction);
                                for c in 0..row.len() {
                                    let q = logq[c].exp();
                                    if q > 0.0 {
                                        row[c] += scale * q * (logq[c] - logp[c] - kl);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::TopK { a, mask } => {
                if wants(*a) {
                    let buf = slot(grads, *a, g.shape());
                    for ((o, gv), m) in buf.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        if *m {
                            *o += gv;
                        }
                    }
                }
            }
            Op::MeanSqDiff { a, b } => {
                let av = val(*a);
                let bv = val(*b);
                let scale = 2.0 * g.as_scalar() / av.rows().max(1) as f64;
                if wants(*a) {
                    let buf = slot(grads, *a, av.shape());
                    for ((o, x), y) in buf.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *o += scale * (x - y);
                    }
                }
                if wants(*b) {
                    let buf = slot(grads, *b, bv.shape());
                    for ((o, x), y) in buf.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *o -= scale * (x - y);
                    }
                }
            }
            Op::WeightedL1 { h, w_dec } => {
                let hv = val(*h);
                let wv = val(*w_dec);
                let scale = g.as_scalar() / hv.rows().max(1) as f64;
                if wants(*h) {
                    let norms = column_l1_norms(wv);
                    let buf = slot(grads, *h, hv.shape());
                    for r in 0..hv.rows() {
                        for (o, n) in buf.row_mut(r).iter_mut().zip(&norms) {
                            *o += scale * n;
                        }
                    }
                }
                if wants(*w_dec) {
                    let col_sums = hv.sum_rows();
                    let buf = slot(grads, *w_dec, wv.shape());
                    for r in 0..wv.rows() {
                        let wr = wv.row(r);
                        for (c, o) in buf.row_mut(r).iter_mut().enumerate() {
                            *o += scale * sign(wr[c]) * col_sums.data()[c];
                        }
                    }
                }
            }
            Op::L1 { h } => {
                if wants(*h) {
                    let hv = val(*h);
                    let scale = g.as_scalar() / hv.rows().max(1) as f64;
                    let buf = slot(grads, *h, hv.shape());
                    for (o, v) in buf.data_mut().iter_mut().zip(hv.data()) {
                        *o += scale * sign(*v);
                    }
                }
            }
            Op::SumAll { a } => {
                if wants(*a) {
                    let s = g.as_scalar();
                    for o in slot(grads, *a, val(*a).shape()).data_mut() {
                        *o += s;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_layer_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        rstd: &[f64],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let xv = &self.nodes[x.0].value;
        let gv = self.nodes[gamma.0].value.data();
        let (rows, cols) = xv.shape();
        let n = cols as f64;
        if self.ng(gamma) || self.ng(beta) {
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for r in 0..rows {
                let xr = xv.row(r);
                let gr = g.row(r);
                for c in 0..cols {
                    let xhat = (xr[c] - mean[r]) * rstd[r];
                    dgamma[c] += gr[c] * xhat;
                    dbeta[c] += gr[c];
                }
            }
            if self.ng(gamma) {
                let buf = slot(grads, gamma, (1, cols));
                for (o, v) in buf.data_mut().iter_mut().zip(&dgamma) {
                    *o += v;
                }
            }
            if self.ng(beta) {
                let buf = slot(grads, beta, (1, cols));
                for (o, v) in buf.data_mut().iter_mut().zip(&dbeta) {
                    *o += v;
                }
            }
        }
        if self.ng(x) {
            let buf = slot(grads, x, (rows, cols));
            let mut dxhat = vec![0.0; cols];
            for r in 0..rows {
                let xr = xv.row(r);
                let gr = g.row(r);
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for c in 0..cols {
                    let xhat = (xr[c] - mean[r]) * rstd[r];
                    dxhat[c] = gr[c] * gv[c];
                    m1 += dxhat[c];
                    m2 += dxhat[c] * xhat;
                }
                m1 /= n;
                m2 /= n;
                for (c, o) in buf.row_mut(r).iter_mut().enumerate() {
                    let xhat = (xr[c] - mean[r]) * rstd[r];
                    *o += rstd[r] * (dxhat[c] - m1 - xhat * m2);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn attention_backward(
    src: &Matrix,
    probs: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
    g: &Matrix,
    dqkv: &mut Matrix,
) {
    let width = src.cols();
    let d = width / 3;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let w3 = width as isize;
    let s = src.data();
    let gd = g.data();
    let mut dp = vec![0.0; seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let q_off = b * seq * width + h * hd;
            let k_off = q_off + d;
            let v_off = q_off + 2 * d;
            let o_off = b * seq * d + h * hd;
            // dP = dO · Vᵀ
            gemm_strided(
                seq, hd, seq, 1.0,
                &gd[o_off..], d as isize, 1,
                &s[v_off..], 1, w3,
                0.0, &mut dp, seq as isize, 1,
            );
            // dV += Pᵀ · dO
            gemm_strided(
                seq, seq, hd, 1.0,
                p, 1, seq as isize,
                &gd[o_off..], d as isize, 1,
                1.0, &mut dqkv.data_mut()[v_off..], w3, 1,
            );
            // dS = P ⊙ (dP − rowdot(dP, P)), folded with the score scale.
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..seq {
                    dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { 0.0 };
                }
            }
            // dQ += dS · K ; dK += dSᵀ · Q
            gemm_strided(
                seq, seq, hd, 1.0,
                &dp, seq as isize, 1,
                &s[k_off..], w3, 1,
                1.0, &mut dqkv.data_mut()[q_off..], w3, 1,
            );
            gemm_strided(
                seq, seq, hd, 1.0,
                &dp, 1, seq as isize,
                &s[q_off..], w3, 1,
                1.0, &mut dqkv.data_mut()[k_off..], w3, 1,
            );
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `tanh` through one `exp`; about twice as fast as libm's `tanh` here.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(row);
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// KL for one row given both distributions in log space. Zero-probability
/// terms of the weighting distribution contribute nothing.
pub(crate) fn kl_row(logp_ref: &[f64], logq: &[f64], direction: KlDirection) -> f64 {
    let (weight, other) = match direction {
        KlDirection::RefToModel => (logp_ref, logq),
        KlDirection::ModelToRef => (logq, logp_ref),
    };
    weight
        .iter()
        .zip(other)
        .filter(|(w, _)| **w > f64::NEG_INFINITY)
        .map(|(w, o)| w.exp() * (w - o))
        .sum()
}

/// L1 norm of each column.
pub fn column_l1_norms(m: &Matrix) -> Vec<f64> {
    let mut norms = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (n, v) in norms.iter_mut().zip(m.row(r)) {
            *n += v.abs();
        }
    }
    norms
}

/// Selection mask of the TopK op. Ties resolve towards the lower index.
pub(crate) fn topk_mask(m: &Matrix, k: usize, allowed: Option<&[bool]>) -> Vec<bool> {
    let (rows, cols) = m.shape();
    if let Some(a) = allowed {
        assert_eq!(a.len(), cols, "allowed mask width");
    }
    let candidates: Vec<usize> = match allowed {
        Some(a) => (0..cols).filter(|&c| a[c]).collect(),
        None => (0..cols).collect(),
    };
    let k = k.min(candidates.len());
    let mut mask = vec![false; rows * cols];
    if k == 0 {
        return mask;
    }
    let mut idx = candidates.clone();
    for r in 0..rows {
        let row = m.row(r);
        idx.copy_from_slice(&candidates);
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, cmp);
        }
        for &c in &idx[..k] {
            mask[r * cols + c] = true;
        }
    }
    mask
}
