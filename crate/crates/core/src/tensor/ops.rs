use std::rc::Rc;

use rand::Rng as _;

use super::real::{gemm_into, MatRef, Real};
use super::tape::{Mode, Op, Tape, Var};
use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Score written into masked-out attention entries before softmax.
///
/// Finite so that a fully masked row stays NaN-free under max-subtraction.
pub const MASK_FILL: f64 = -1e9;

/// Stack of binary `size x size` masks, one per batch element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    size: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(batch: usize, size: usize, data: Vec<bool>) -> Result<Self> {
        if batch == 0 || size == 0 || data.len() != batch * size * size {
            return Err(Error::invalid(format!(
                "mask of {batch} x {size} x {size} given {} entries",
                data.len()
            )));
        }
        Ok(Mask { batch, size, data })
    }

    pub fn all_ones(batch: usize, size: usize) -> Self {
        Mask {
            batch,
            size,
            data: vec![true; batch * size * size],
        }
    }

    pub fn identity(batch: usize, size: usize) -> Self {
        let data = (0..batch * size * size)
            .map(|i| {
                let r = i % (size * size);
                r / size == r % size
            })
            .collect();
        Mask { batch, size, data }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> bool {
        self.data[(b * self.size + i) * self.size + j]
    }

    /// Checks that a tensor of `shape` can be masked: trailing `size x size`
    /// and leading element count a multiple of the mask batch.
    fn check(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        let r = shape.len();
        let bad = || Error::shape(op, shape, &[self.batch, self.size, self.size]);
        if r < 2 || shape[r - 1] != self.size || shape[r - 2] != self.size {
            return Err(bad());
        }
        let ok = if r == 2 {
            self.batch == 1
        } else {
            self.batch == 1 || shape[0] == self.batch
        };
        if !ok {
            return Err(bad());
        }
        Ok(())
    }

    /// Visits every entry of a masked tensor with `len` elements; leading
    /// dimensions beyond the first broadcast the per-batch mask.
    pub(super) fn for_each_entry(&self, len: usize, mut f: impl FnMut(usize, bool)) {
        let plane = self.size * self.size;
        let planes = len / plane;
        let per = planes / self.batch;
        for p in 0..planes {
            let m = &self.data[(p / per) * plane..(p / per + 1) * plane];
            for (k, &keep) in m.iter().enumerate() {
                f(p * plane + k, keep);
            }
        }
    }
}

pub(super) struct MatMulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

/// Shape rules for batched matmul. Batch dimensions must agree, or one side
/// has batch element count 1 and is broadcast.
pub(super) fn matmul_plan(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatMulPlan> {
    let err = || Error::shape("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, k) = (a[ra - 2], a[ra - 1]);
    let (kb, n) = if trans_b {
        (b[rb - 1], b[rb - 2])
    } else {
        (b[rb - 2], b[rb - 1])
    };
    if k != kb {
        return Err(err());
    }
    let (ab, bb) = (&a[..ra - 2], &b[..rb - 2]);
    let (pa, pb): (usize, usize) = (ab.iter().product(), bb.iter().product());
    let (batch, lead, a_batched, b_batched) = if ab == bb {
        (pa, ab.to_vec(), pa > 1, pb > 1)
    } else if pb == 1 {
        (pa, ab.to_vec(), pa > 1, false)
    } else if pa == 1 {
        (pb, bb.to_vec(), false, true)
    } else {
        return Err(err());
    };
    let mut out_shape = lead;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        batch,
        m,
        k,
        n,
        a_batched: a_batched || batch == 1,
        b_batched: b_batched && batch > 1,
        out_shape,
    })
}

impl<T: Real> Tape<T> {
    /// Batched matrix product `[.., m, k] x [.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a x b^T` for `[.., m, k]` and `[.., n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let plan = matmul_plan(va.shape(), vb.shape(), trans_b)?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); plan.batch * m * n];
        let opb = |i: usize| {
            let off = if plan.b_batched { i * k * n } else { 0 };
            if trans_b {
                MatRef::dense(&vb.data()[off..], n, k).t()
            } else {
                MatRef::dense(&vb.data()[off..], k, n)
            }
        };
        if plan.a_batched && !plan.b_batched {
            gemm_into(
                MatRef::dense(va.data(), plan.batch * m, k),
                opb(0),
                T::zero(),
                &mut out,
            );
        } else {
            for i in 0..plan.batch {
                let off = if plan.a_batched { i * m * k } else { 0 };
                gemm_into(
                    MatRef::dense(&va.data()[off..], m, k),
                    opb(i),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor {
            shape: plan.out_shape,
            data: out,
        };
        Ok(self.push(
            value,
            &[ia, ib],
            Op::MatMul {
                a: ia,
                b: ib,
                trans_b,
            },
        ))
    }

    /// Elementwise sum. `b` may have a shape equal to a suffix of `a`'s shape,
    /// in which case it is repeated over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let vb = self.nodes[ib].value.data();
        let n = vb.len();
        let mut value = self.nodes[ia].value.clone();
        for chunk in value.data.chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(vb) {
                *x += y;
            }
        }
        Ok(self.push(value, &[ia, ib], Op::Add { a: ia, b: ib }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        Ok(self.push(value, &[ia, ib], Op::Mul { a: ia, b: ib }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let ix = self.check(x)?;
        let mut value = self.nodes[ix].value.clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        Ok(self.push(value, &[ix], Op::Scale { x: ix, c }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let mut value = self.nodes[ix].value.clone();
        value.data.iter_mut().for_each(|v| {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        });
        Ok(self.push(value, &[ix], Op::Relu { x: ix }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s: T = self.nodes[ix].value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), &[ix], Op::Sum { x: ix }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.clone().reshaped(shape)?;
        Ok(self.push(value, &[ix], Op::Reshape { x: ix }))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::shape("swap_axes12", s, &[0, 0, 0, 0]));
        }
        let (n0, n1, n2, n3) = (s[0], s[1], s[2], s[3]);
        let mut data = Vec::with_capacity(v.len());
        for i0 in 0..n0 {
            for i2 in 0..n2 {
                for i1 in 0..n1 {
                    let src = ((i0 * n1 + i1) * n2 + i2) * n3;
                    data.extend_from_slice(&v.data()[src..src + n3]);
                }
            }
        }
        let value = Tensor {
            shape: vec![n0, n2, n1, n3],
            data,
        };
        Ok(self.push(value, &[ix], Op::SwapAxes12 { x: ix }))
    }

    /// Concatenation along the last dimension.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let first = idx
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = {
            let s = self.nodes[*first].value.shape();
            s[..s.len() - 1].to_vec()
        };
        let mut width = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s[..s.len() - 1] != *lead {
                return Err(Error::shape(
                    "concat_lastdim",
                    self.nodes[*first].value.shape(),
                    s,
                ));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let w = v.last_dim();
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        Ok(self.push(
            Tensor { shape, data },
            &idx,
            Op::Concat { parts: idx.clone() },
        ))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let mut value = self.nodes[ix].value.clone();
        let n = value.last_dim();
        for row in value.data.chunks_mut(n) {
            softmax_row(row);
        }
        Ok(self.push(value, &[ix], Op::Softmax { x: ix }))
    }

    /// Replaces entries where the mask is 0 with [`MASK_FILL`].
    pub fn masked_fill_neg_inf(&mut self, x: Var, mask: &Rc<Mask>) -> Result<Var> {
        let ix = self.check(x)?;
        mask.check("masked_fill_neg_inf", self.nodes[ix].value.shape())?;
        let mut value = self.nodes[ix].value.clone();
        let fill = T::lit(MASK_FILL);
        let len = value.len();
        mask.for_each_entry(len, |i, keep| {
            if !keep {
                value.data[i] = fill;
            }
        });
        Ok(self.push(
            value,
            &[ix],
            Op::MaskedFill {
                x: ix,
                mask: Rc::clone(mask),
            },
        ))
    }

    /// Elementwise product with the binary mask.
    pub fn hadamard_mask(&mut self, x: Var, mask: &Rc<Mask>) -> Result<Var> {
        let ix = self.check(x)?;
        mask.check("hadamard_mask", self.nodes[ix].value.shape())?;
        let mut value = self.nodes[ix].value.clone();
        let len = value.len();
        mask.for_each_entry(len, |i, keep| {
            if !keep {
                value.data[i] = T::zero();
            }
        });
        Ok(self.push(
            value,
            &[ix],
            Op::MaskMul {
                x: ix,
                mask: Rc::clone(mask),
            },
        ))
    }

    /// Gathers rows of `table` (`[V, w]`); output shape is `index_shape ++ [w]`.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        indices: &[usize],
        index_shape: &[usize],
    ) -> Result<Var> {
        let it = self.check(table)?;
        let t = &self.nodes[it].value;
        if t.shape().len() != 2 || index_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("embedding_lookup", t.shape(), index_shape));
        }
        let (rows, w) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(w);
        Ok(self.push(
            Tensor { shape, data },
            &[it],
            Op::Embedding {
                table: it,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Sums rows of `x` (`[.., S, d]`) whose `valid` flag is set, per leading
    /// batch element. Output shape drops the `S` axis.
    pub fn sum_rows_masked(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::shape("sum_rows_masked", s, &[valid.len()]));
        }
        let (rows, d) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = v.len() / (rows * d);
        if valid.len() != batch * rows {
            return Err(Error::shape("sum_rows_masked", s, &[valid.len()]));
        }
        let mut data = vec![T::zero(); batch * d];
        for b in 0..batch {
            let flags = &valid[b * rows..(b + 1) * rows];
            if !flags.iter().any(|&f| f) {
                return Err(Error::invalid(format!(
                    "sum_rows_masked: batch element {b} has no valid rows"
                )));
            }
            let acc = &mut data[b * d..(b + 1) * d];
            for (r, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
                let row = &v.data()[(b * rows + r) * d..(b * rows + r + 1) * d];
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(d);
        Ok(self.push(
            Tensor { shape, data },
            &[ix],
            Op::SumRowsMasked {
                x: ix,
                valid: valid.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let ix = self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let mut value = self.nodes[ix].value.clone();
        let keep: Vec<T> = (0..value.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        for (v, &k) in value.data.iter_mut().zip(&keep) {
            *v *= k;
        }
        Ok(self.push(value, &[ix], Op::Dropout { x: ix, keep }))
    }

    /// Batch normalization over all leading positions of `x` (`[.., d]`).
    ///
    /// In train mode, statistics come from the rows flagged in `stats_rows`
    /// (all rows when `None`) and the running estimates are updated; every
    /// row is normalized with the same statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
        stats_rows: Option<&[bool]>,
    ) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let v = &self.nodes[ix].value;
        let d = v.last_dim();
        let rows = v.len() / d;
        for (name, p) in [("gamma", ig), ("beta", ib)] {
            if self.nodes[p].value.shape() != [d] {
                return Err(Error::shape(name, self.nodes[p].value.shape(), &[d]));
            }
        }
        if state.mean.len() != d {
            return Err(Error::shape("batch_norm state", &[state.mean.len()], &[d]));
        }
        if let Some(f) = stats_rows {
            if f.len() != rows {
                return Err(Error::shape("batch_norm rows", &[f.len()], &[rows]));
            }
        }
        let eps = T::lit(state.eps);
        let (mean, var, saved_rows) = match mode {
            Mode::Train => {
                let flags: Vec<bool> =
                    stats_rows.map_or_else(|| vec![true; rows], <[bool]>::to_vec);
                let n = flags.iter().filter(|&&f| f).count();
                if n < 2 {
                    return Err(Error::invalid(format!(
                        "batch_norm in train mode needs at least 2 rows, got {n}"
                    )));
                }
                let nt = T::from_usize(n).unwrap();
                let mut mean = vec![T::zero(); d];
                for (r, row) in v.data().chunks(d).enumerate() {
                    if flags[r] {
                        for (m, &x) in mean.iter_mut().zip(row) {
                            *m += x;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nt);
                let mut var = vec![T::zero(); d];
                for (r, row) in v.data().chunks(d).enumerate() {
                    if flags[r] {
                        for ((s, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                            *s += (x - m) * (x - m);
                        }
                    }
                }
                var.iter_mut().for_each(|s| *s /= nt);
                let mom = T::lit(state.momentum);
                let unbias = nt / (nt - T::one());
                for j in 0..d {
                    state.mean[j] = (T::one() - mom) * state.mean[j] + mom * mean[j];
                    state.var[j] = (T::one() - mom) * state.var[j] + mom * var[j] * unbias;
                }
                (mean, var, Some(flags))
            }
            Mode::Eval => (state.mean.clone(), state.var.clone(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let gam = self.nodes[ig].value.data();
        let bet = self.nodes[ib].value.data();
        let mut xhat = Vec::with_capacity(v.len());
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(gam[j] * h + bet[j]);
            }
        }
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: out,
        };
        Ok(self.push(
            value,
            &[ix, ig, ib],
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
                stats_rows: saved_rows,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let v = &self.nodes[il].value;
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy_logits", s, &[labels.len()]));
        }
        let c = s[1];
        let mut probs = v.data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            if label >= c {
                return Err(Error::IndexOutOfRange {
                    index: label,
                    size: c,
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[label];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            &[il],
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Running statistics of one batch-normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}
