use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{matmul_plan, Mask};
use super::real::{gemm_into, MatRef, Real};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Train/eval switch for stochastic and batch-statistics ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(super) tape: u64,
    pub(super) index: usize,
}

pub(super) enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Relu {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    SwapAxes12 {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Softmax {
        x: usize,
    },
    MaskedFill {
        x: usize,
        mask: Rc<Mask>,
    },
    MaskMul {
        x: usize,
        mask: Rc<Mask>,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    SumRowsMasked {
        x: usize,
        valid: Vec<bool>,
    },
    Dropout {
        x: usize,
        keep: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        // Rows that contributed to batch statistics; `None` in eval mode.
        stats_rows: Option<Vec<bool>>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

pub(super) struct Node<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is single-threaded and append-only. Ops whose inputs do not require
/// gradients are stored as constants and keep no backward state.
pub struct Tape<T> {
    id: u64,
    pub(super) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v).expect("var from another tape")].requires_grad
    }

    pub(super) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    pub(super) fn push(&mut self, value: Tensor<T>, parents: &[usize], op: Op<T>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Gradients of a scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.map(|data| Tensor {
                        shape: self.nodes[i].value.shape().to_vec(),
                        data,
                    })
                })
                .collect(),
        })
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.backprop_matmul(*a, *b, *trans_b, g, grads),
            Op::Add { a, b } => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let n = self.val(*b).len();
                    let db = slot(grads, *b, n);
                    for chunk in g.chunks(n) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if self.wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, g.len());
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = slot(grads, *x, g.len());
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }
            Op::Relu { x } => {
                let dx = slot(grads, *x, g.len());
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                    if y > T::zero() {
                        *d += gi;
                    }
                }
            }
            Op::Sum { x } => {
                let n = self.val(*x).len();
                let dx = slot(grads, *x, n);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Reshape { x } => add_into(slot(grads, *x, g.len()), g),
            Op::SwapAxes12 { x } => {
                // out is [a, c, b, d]; the gradient swaps back to [a, b, c, d]
                let s = out.shape();
                let (n0, n1, n2, n3) = (s[0], s[1], s[2], s[3]);
                let dx = slot(grads, *x, g.len());
                for i0 in 0..n0 {
                    for i1 in 0..n1 {
                        for i2 in 0..n2 {
                            let src = ((i0 * n1 + i1) * n2 + i2) * n3;
                            let dst = ((i0 * n2 + i2) * n1 + i1) * n3;
                            add_into(&mut dx[dst..dst + n3], &g[src..src + n3]);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let width = out.last_dim();
                let rows = g.len() / width;
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).last_dim();
                    if self.wants(p) {
                        let dp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * width + offset..r * width + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Softmax { x } => {
                let n = out.last_dim();
                let dx = slot(grads, *x, g.len());
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gi - dot);
                    }
                }
            }
            Op::MaskedFill { x, mask } | Op::MaskMul { x, mask } => {
                let dx = slot(grads, *x, g.len());
                mask.for_each_entry(g.len(), |idx, keep| {
                    if keep {
                        dx[idx] += g[idx];
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let w = self.val(*table).last_dim();
                let n = self.val(*table).len();
                let dt = slot(grads, *table, n);
                for (pos, &row) in indices.iter().enumerate() {
                    add_into(&mut dt[row * w..(row + 1) * w], &g[pos * w..(pos + 1) * w]);
                }
            }
            Op::SumRowsMasked { x, valid } => {
                let d = out.last_dim();
                let n = self.val(*x).len();
                let rows_per = valid.len() / (g.len() / d);
                let dx = slot(grads, *x, n);
                for (row, &keep) in valid.iter().enumerate() {
                    if keep {
                        let b = row / rows_per;
                        add_into(&mut dx[row * d..(row + 1) * d], &g[b * d..(b + 1) * d]);
                    }
                }
            }
            Op::Dropout { x, keep } => {
                let dx = slot(grads, *x, g.len());
                for ((d, &gi), &k) in dx.iter_mut().zip(g).zip(keep) {
                    *d += gi * k;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats_rows,
            } => self.backprop_batch_norm(
                (*x, *gamma, *beta),
                xhat,
                inv_std,
                stats_rows.as_deref(),
                g,
                grads,
            ),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.val(*logits).last_dim();
                let n = labels.len();
                let scale = g[0] / T::from_usize(n).unwrap();
                let dl = slot(grads, *logits, n * c);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        dl[r * c + j] += (probs[r * c + j] - onehot) * scale;
                    }
                }
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: usize,
        b: usize,
        trans_b: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (va, vb) = (self.val(a), self.val(b));
        let plan = matmul_plan(va.shape(), vb.shape(), trans_b).expect("validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let b_rows = if trans_b { n } else { k };
        let b_cols = if trans_b { k } else { n };
        // op(B_i)^T as a view: for C = A B it is B^T, for C = A B^T it is B
        let opb_t = |i: usize| {
            let off = if plan.b_batched { i * k * n } else { 0 };
            let view = MatRef::dense(&vb.data()[off..], b_rows, b_cols);
            if trans_b {
                view
            } else {
                view.t()
            }
        };
        if self.wants(a) {
            let da = slot(grads, a, va.len());
            if plan.a_batched && !plan.b_batched {
                let rows = plan.batch * m;
                gemm_into(MatRef::dense(g, rows, n), opb_t(0), T::one(), da);
            } else {
                for i in 0..plan.batch {
                    let dc = MatRef::dense(&g[i * m * n..], m, n);
                    let off = if plan.a_batched { i * m * k } else { 0 };
                    gemm_into(dc, opb_t(i), T::one(), &mut da[off..off + m * k]);
                }
            }
        }
        if self.wants(b) {
            let db = slot(grads, b, vb.len());
            if plan.a_batched && !plan.b_batched {
                let rows = plan.batch * m;
                let af = MatRef::dense(va.data(), rows, k);
                let dc = MatRef::dense(g, rows, n);
                if trans_b {
                    gemm_into(dc.t(), af, T::one(), db);
                } else {
                    gemm_into(af.t(), dc, T::one(), db);
                }
            } else {
                for i in 0..plan.batch {
                    let a_off = if plan.a_batched { i * m * k } else { 0 };
                    let ai = MatRef::dense(&va.data()[a_off..], m, k);
                    let dc = MatRef::dense(&g[i * m * n..], m, n);
                    let off = if plan.b_batched { i * k * n } else { 0 };
                    let dst = &mut db[off..off + k * n];
                    if trans_b {
                        gemm_into(dc.t(), ai, T::one(), dst);
                    } else {
                        gemm_into(ai.t(), dc, T::one(), dst);
                    }
                }
            }
        }
    }

    fn backprop_batch_norm(
        &self,
        (x, gamma, beta): (usize, usize, usize),
        xhat: &[T],
        inv_std: &[T],
        stats_rows: Option<&[bool]>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = inv_std.len();
        let rows = g.len() / d;
        let gam = self.val(gamma).data();
        let mut sum_dxhat = vec![T::zero(); d];
        let mut sum_dxhat_xhat = vec![T::zero(); d];
        for r in 0..rows {
            for j in 0..d {
                let idx = r * d + j;
                let dxh = g[idx] * gam[j];
                sum_dxhat[j] += dxh;
                sum_dxhat_xhat[j] += dxh * xhat[idx];
            }
        }
        if self.wants(gamma) {
            let dg = slot(grads, gamma, d);
            for r in 0..rows {
                for j in 0..d {
                    dg[j] += g[r * d + j] * xhat[r * d + j];
                }
            }
        }
        if self.wants(beta) {
            let db = slot(grads, beta, d);
            for r in 0..rows {
                add_into(db, &g[r * d..(r + 1) * d]);
            }
        }
        if self.wants(x) {
            let dx = slot(grads, x, g.len());
            let n_stats = stats_rows.map(|v| v.iter().filter(|&&b| b).count());
            for r in 0..rows {
                let in_stats = stats_rows.is_some_and(|v| v[r]);
                for j in 0..d {
                    let idx = r * d + j;
                    let mut v = inv_std[j] * g[idx] * gam[j];
                    if in_stats {
                        let n = T::from_usize(n_stats.unwrap()).unwrap();
                        v -= inv_std[j] / n * (sum_dxhat[j] + xhat[idx] * sum_dxhat_xhat[j]);
                    }
                    dx[idx] += v;
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` is not a trainable leaf reached by
    /// the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros of `shape` when unreached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
