//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every op appends one record holding its output value and whatever it needs
//! for the vector-Jacobian product. Records only reference earlier records, so
//! `backward` walks the list once in reverse append order.

use super::value::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a record on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowDot(Var, Var),
    SegmentSoftmax(Var, Vec<usize>),
    MulRows(Var, Var),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::RowDot(a, b)
            | Op::MulRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Gelu(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a) => vec![*a],
            Op::Softmax(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Record {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when `v` did not participate in the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.records.push(Record {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.records.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.records[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.records[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.records[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.records[v.0].requires_grad);
        debug_assert!(
            value.is_finite() || inputs.iter().any(|v| !self.records[v.0].value.is_finite()),
            "non-finite output from finite inputs in {op:?}"
        );
        self.records.push(Record {
            value,
            op,
            requires_grad,
        });
        Var(self.records.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, p) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, p);
        Ok(self.push(Tensor::matrix(m, p, out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1×d` (or length-`d`) row to every row of an `m×d` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, d) = self.dims(a);
        if self.value(row).len() != d {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        self.push(out, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_forward(self.value(a), false);
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise softmax where row `t` only ranges over columns `0..=t`.
    /// Masked entries are exactly zero and never read.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_forward(self.value(a), true);
        self.push(out, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.dims(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(a))
    }

    /// Output row `e` is row `idx[e]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, d) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", self.shape(a), &[bad]));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(src.row_slice(i));
        }
        let out = Tensor::matrix(idx.len(), d, data)?;
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Output is `n×d`; row `idx[e]` accumulates row `e` of `a`, in order of `e`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (m, d) = self.dims(a);
        if idx.len() != m {
            return Err(Error::shape(
                "scatter_add_rows",
                self.shape(a),
                &[idx.len()],
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("scatter_add_rows", &[n], &[bad]));
        }
        let src = self.value(a);
        let mut data = vec![0.0; n * d];
        for (e, &i) in idx.iter().enumerate() {
            for (o, v) in data[i * d..(i + 1) * d].iter_mut().zip(src.row_slice(e)) {
                *o += v;
            }
        }
        let out = Tensor::matrix(n, d, data)?;
        Ok(self.push(out, Op::ScatterAddRows(a, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = parts
            .first()
            .map(|&v| self.dims(v).1)
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pd) = self.dims(p);
            if pd != d {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let out = Tensor::matrix(m, d, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, d) = self.dims(a);
        if start + len > m {
            return Err(Error::shape("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::matrix(len, d, data)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&v| self.dims(v).0)
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let mut total = 0;
        for &p in parts {
            let (pm, pd) = self.dims(p);
            if pm != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            total += pd;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, d) = self.dims(a);
        if start + len > d {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src.row_slice(i)[start..start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Row-wise inner products of two `m×d` matrices, as `m×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("row_dot", self.shape(a), self.shape(b)));
        }
        let (m, _) = self.dims(a);
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..m)
            .map(|i| {
                av.row_slice(i)
                    .iter()
                    .zip(bv.row_slice(i))
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let out = Tensor::matrix(m, 1, data)?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    /// Softmax of an `E×1` score column within groups sharing `segment[e]`.
    pub fn segment_softmax(&mut self, a: Var, segment: &[usize]) -> Result<Var> {
        let (e, c) = self.dims(a);
        if c != 1 || segment.len() != e {
            return Err(Error::shape(
                "segment_softmax",
                self.shape(a),
                &[segment.len()],
            ));
        }
        let n = segment.iter().max().map_or(0, |m| m + 1);
        let x = self.value(a).data();
        let mut max = vec![f64::NEG_INFINITY; n];
        for (i, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(x[i]);
        }
        let mut denom = vec![0.0; n];
        let mut out: Vec<f64> = segment
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let v = (x[i] - max[s]).exp();
                denom[s] += v;
                v
            })
            .collect();
        for (o, &s) in out.iter_mut().zip(segment) {
            *o /= denom[s];
        }
        let out = Tensor::matrix(e, 1, out)?;
        Ok(self.push(out, Op::SegmentSoftmax(a, segment.to_vec())))
    }

    /// Scales row `i` of `a (m×d)` by `w[i]` where `w` is `m×1`.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, d) = self.dims(a);
        if self.value(w).len() != m {
            return Err(Error::shape("mul_rows", self.shape(a), self.shape(w)));
        }
        let wv = self.value(w).data();
        let mut out = self.value(a).clone();
        for (row, &s) in out.data_mut().chunks_mut(d.max(1)).zip(wv) {
            for o in row {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulRows(a, w)))
    }

    /// Column means of an `m×d` matrix as `1×d`; rows are summed in index order.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, d) = self.dims(a);
        if m == 0 {
            return Err(Error::Contract("mean of zero rows".into()));
        }
        let src = self.value(a);
        let mut data = vec![0.0; d];
        for i in 0..m {
            for (o, v) in data.iter_mut().zip(src.row_slice(i)) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= m as f64;
        }
        Ok(self.push(Tensor::row(data), Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean negative log-likelihood of `targets[t]` under `softmax(logits[t])`
    /// over the positions with `mask[t]`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (t_len, v) = self.dims(logits);
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::shape(
                "cross_entropy_masked",
                self.shape(logits),
                &[targets.len(), mask.len()],
            ));
        }
        let rows: Vec<usize> = (0..t_len).filter(|&t| mask[t]).collect();
        if rows.is_empty() {
            return Err(Error::DegenerateLoss);
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut picked = Vec::with_capacity(rows.len());
        let mut total = 0.0;
        for &t in &rows {
            let target = targets[t];
            if target >= v {
                return Err(Error::Contract(format!(
                    "target id {target} at position {t} outside vocabulary of {v}"
                )));
            }
            let row = lv.row_slice(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[target];
            probs.extend(row.iter().map(|x| (x - max).exp() / z));
            picked.push(target);
        }
        let loss = total / rows.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows,
                targets: picked,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.records.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.records[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_record(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self
            .records
            .iter()
            .map(|r| r.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.records[v.0].requires_grad {
            return;
        }
        let g = g.reshaped(self.shape(v));
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.records[v.0].requires_grad
    }

    fn backprop_record(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let rec = &self.records[i];
        let gd = g.data();
        match &rec.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, p) = self.dims(*b);
                if self.wants(*a) {
                    let da = matmul_nt(gd, self.value(*b).data(), m, p, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.wants(*b) {
                    let db = matmul_tn(self.value(*a).data(), gd, m, k, p);
                    self.accumulate(grads, *b, Tensor::matrix(k, p, db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let (m, d) = self.dims(*a);
                    let mut dr = vec![0.0; d];
                    for r in 0..m {
                        for (o, v) in dr.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row(dr));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|x| x * c).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose());
            }
            Op::Softmax(x) => {
                let y = &rec.value;
                let (m, d) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * d];
                for r in 0..m {
                    let yr = y.row_slice(r);
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(m, d, dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, d) = self.dims(*x);
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * d];
                    for r in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            dx[r * d + j] =
                                inv_std[r] / d as f64 * (d as f64 * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(m, d, dx)?);
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..m {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::row(dg));
                    self.accumulate(grads, *bias, Tensor::row(db));
                }
            }
            Op::Gelu(a) => {
                let d = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, gv)| gv * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::GatherRows(a, idx) => {
                let (m, d) = self.dims(*a);
                let mut da = vec![0.0; m * d];
                for (e, &r) in idx.iter().enumerate() {
                    for (o, v) in da[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&gd[e * d..(e + 1) * d])
                    {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, d, da)?);
            }
            Op::ScatterAddRows(a, idx) => {
                let d = g.cols();
                let mut da = Vec::with_capacity(idx.len() * d);
                for &r in idx {
                    da.extend_from_slice(&gd[r * d..(r + 1) * d]);
                }
                self.accumulate(grads, *a, Tensor::matrix(idx.len(), d, da)?);
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pm, _) = self.dims(p);
                    if self.wants(p) {
                        let slice = gd[offset * d..(offset + pm) * d].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(pm, d, slice)?);
                    }
                    offset += pm;
                }
            }
            Op::SliceRows(a, start) => {
                let (m, d) = self.dims(*a);
                let mut da = vec![0.0; m * d];
                da[start * d..start * d + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, Tensor::matrix(m, d, da)?);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let (_, pd) = self.dims(p);
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(m * pd);
                        for r in 0..m {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + pd]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(m, pd, dp)?);
                    }
                    offset += pd;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, d) = self.dims(*a);
                let len = g.cols();
                let mut da = vec![0.0; m * d];
                for r in 0..m {
                    da[r * d + start..r * d + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *a, Tensor::matrix(m, d, da)?);
            }
            Op::RowDot(a, b) => {
                let (m, d) = self.dims(*a);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scaled = |src: &[f64]| -> Vec<f64> {
                    let mut out = vec![0.0; m * d];
                    for r in 0..m {
                        for j in 0..d {
                            out[r * d + j] = gd[r] * src[r * d + j];
                        }
                    }
                    out
                };
                if self.wants(*a) {
                    self.accumulate(grads, *a, Tensor::matrix(m, d, scaled(bv))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, Tensor::matrix(m, d, scaled(av))?);
                }
            }
            Op::SegmentSoftmax(a, segment) => {
                let y = rec.value.data();
                let n = segment.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n];
                for (e, &s) in segment.iter().enumerate() {
                    dot[s] += y[e] * gd[e];
                }
                let dx = segment
                    .iter()
                    .enumerate()
                    .map(|(e, &s)| y[e] * (gd[e] - dot[s]))
                    .collect();
                self.accumulate(grads, *a, Tensor::matrix(segment.len(), 1, dx)?);
            }
            Op::MulRows(a, w) => {
                let (m, d) = self.dims(*a);
                let wv = self.value(*w).data();
                if self.wants(*a) {
                    let mut da = gd.to_vec();
                    for r in 0..m {
                        for o in &mut da[r * d..(r + 1) * d] {
                            *o *= wv[r];
                        }
                    }
                    self.accumulate(grads, *a, Tensor::matrix(m, d, da)?);
                }
                if self.wants(*w) {
                    let av = self.value(*a);
                    let dw = (0..m)
                        .map(|r| {
                            av.row_slice(r)
                                .iter()
                                .zip(&gd[r * d..(r + 1) * d])
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *w, Tensor::matrix(m, 1, dw)?);
                }
            }
            Op::MeanRows(a) => {
                let (m, d) = self.dims(*a);
                let mut da = Vec::with_capacity(m * d);
                for _ in 0..m {
                    da.extend(gd.iter().map(|v| v / m as f64));
                }
                self.accumulate(grads, *a, Tensor::matrix(m, d, da)?);
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let (t_len, v) = self.dims(*logits);
                let scale = gd[0] / rows.len() as f64;
                let mut dl = vec![0.0; t_len * v];
                for (k, (&t, &target)) in rows.iter().zip(targets).enumerate() {
                    let dst = &mut dl[t * v..(t + 1) * v];
                    for (o, p) in dst.iter_mut().zip(&probs[k * v..(k + 1) * v]) {
                        *o = p * scale;
                    }
                    dst[target] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::matrix(t_len, v, dl)?);
            }
        }
        Ok(())
    }
}

fn softmax_forward(x: &Tensor, causal: bool) -> Tensor {
    let (m, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * d];
    for r in 0..m {
        let width = if causal { (r + 1).min(d) } else { d };
        let row = &x.row_slice(r)[..width];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * d..r * d + width];
        let mut z = 0.0;
        for (o, v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in dst.iter_mut() {
            *o /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
