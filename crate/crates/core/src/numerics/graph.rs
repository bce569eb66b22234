//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape. Nodes are stored in creation
//! order, which is a topological order, so the backward sweep is a single pass
//! in reverse index order and gradient accumulation order is fixed.

use std::collections::HashMap;

use super::tensor::{axis_split, gemm_nn, gemm_nt, gemm_tn, sigmoid};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulCol(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax(Var, usize),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    LayerNorm { x: Var, eps: f64 },
    FrobNormalize(Var),
    ScalarFn { x: Var, local_grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape bound to a parameter store for the duration of one
/// forward/backward pass.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked (used for input-gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Affine map over the trailing dimension, broadcast over leading ones.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.rank() != 2 || xs.cols() != ws.shape()[0] {
            return Err(Error::dim("linear", xs.shape(), ws.shape()));
        }
        let (rows, d_in, d_out) = (xs.rows(), ws.shape()[0], ws.shape()[1]);
        let mut data = gemm_nn(xs.data(), ws.data(), rows, d_in, d_out);
        if let Some(b) = b {
            let bs = self.value(b);
            if bs.numel() != d_out {
                return Err(Error::dim("linear bias", ws.shape(), bs.shape()));
            }
            for row in data.chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(bs.data()) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// `x * s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(x), sv.shape()));
        }
        let value = self.value(x).scale(sv.item());
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::MulScalar(x, s), rg))
    }

    /// Scales row `r` of `x[R,C]` by `s[r]`, where `s` has `R` elements.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if xv.rows() != sv.numel() {
            return Err(Error::dim("mul_col", xv.shape(), sv.shape()));
        }
        let c = xv.cols();
        let mut value = xv.clone();
        for (row, &f) in value.data_mut().chunks_mut(c).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::MulCol(x, s), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).silu();
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(value, Op::Abs(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Column means of a matrix view: `[R,C] -> [1,C]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (acc, &v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        let value = Tensor::new([1, c], data).expect("valid shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanRows(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of the trailing dimension.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > c {
            return Err(Error::contract(format!(
                "slice {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Selects rows of a matrix view: `[R,C] -> [idx.len(), C]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= xv.rows()) {
            return Err(Error::contract(format!(
                "gather indices out of range for {:?}",
                xv.shape()
            )));
        }
        let value = xv.gather_rows(idx);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Scatter-adds row `i` of `x` into row `idx[i]` of a zero `[rows, C]` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::contract(format!(
                "scatter of {:?} into {rows} rows with {} indices",
                xv.shape(),
                idx.len()
            )));
        }
        let c = xv.cols();
        let mut value = Tensor::zeros([rows, c]);
        for (src, &dst) in xv.data().chunks(c).zip(idx) {
            for (o, &v) in value.data_mut()[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ScatterRows(x, idx.to_vec()), rg))
    }

    /// Picks `x[r, c]` for each `(r, c)` into a `[n, 1]` column.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() || idx.iter().any(|&(r, c)| r >= xv.rows() || c >= xv.cols()) {
            return Err(Error::contract(format!(
                "pick indices out of range for {:?}",
                xv.shape()
            )));
        }
        let data = idx.iter().map(|&(r, c)| xv.at(r, c)).collect();
        let value = Tensor::new([idx.len(), 1], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Pick(x, idx.to_vec()), rg))
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(c) {
            let (mean, rstd) = row_stats(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::LayerNorm { x, eps }, rg)
    }

    /// `x / ‖x‖_F`. Fails on a zero tensor.
    pub fn frob_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norm = xv.frobenius_norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "cannot normalize tensor with Frobenius norm {norm}"
            )));
        }
        let value = xv.scale(1.0 / norm);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::FrobNormalize(x), rg))
    }

    /// Records a scalar function of `x` whose value and gradient were computed
    /// outside the tape.
    pub fn scalar_fn(&mut self, x: Var, value: f64, local_grad: Tensor) -> Result<Var> {
        if local_grad.shape() != self.shape(x) {
            return Err(Error::dim("scalar_fn", self.shape(x), local_grad.shape()));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, local_grad }, rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Backward { grads })
    }

    fn propagate(&self, op: &Op, y: &Tensor, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let da = gemm_nt(dy.data(), bv.data(), m, n, k);
                    self.acc(grads, *a, Tensor::new([m, k], da).unwrap());
                }
                if self.requires_grad(*b) {
                    let db = gemm_tn(av.data(), dy.data(), k, m, n);
                    self.acc(grads, *b, Tensor::new([k, n], db).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, d_in, d_out) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.requires_grad(*x) {
                    let dx = gemm_nt(dy.data(), wv.data(), rows, d_out, d_in);
                    self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.requires_grad(*w) {
                    let dw = gemm_tn(xv.data(), dy.data(), d_in, rows, d_out);
                    self.acc(grads, *w, Tensor::new([d_in, d_out], dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.requires_grad(*b)) {
                    let mut db = vec![0.0; d_out];
                    for row in dy.data().chunks(d_out) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.shape(b).to_vec();
                    self.acc(grads, b, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || dy.clone());
                self.acc_if(grads, *b, || dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || dy.clone());
                self.acc_if(grads, *b, || dy.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_if(grads, *a, || dy.zip_map(bv, |g, v| g * v).unwrap());
                self.acc_if(grads, *b, || dy.zip_map(av, |g, v| g * v).unwrap());
            }
            Op::Scale(x, s) => self.acc_if(grads, *x, || dy.scale(*s)),
            Op::MulScalar(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                self.acc_if(grads, *x, || dy.scale(sv.item()));
                self.acc_if(grads, *s, || {
                    let d: f64 = dy.data().iter().zip(xv.data()).map(|(g, v)| g * v).sum();
                    Tensor::new(sv.shape().to_vec(), vec![d]).unwrap()
                });
            }
            Op::MulCol(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = xv.cols();
                self.acc_if(grads, *x, || {
                    let mut dx = dy.clone();
                    for (row, &f) in dx.data_mut().chunks_mut(c).zip(sv.data()) {
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    dx
                });
                self.acc_if(grads, *s, || {
                    let d = dy
                        .data()
                        .chunks(c)
                        .zip(xv.data().chunks(c))
                        .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::new(sv.shape().to_vec(), d).unwrap()
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                self.acc_if(grads, *x, || {
                    dy.zip_map(xv, |g, v| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .unwrap()
                });
            }
            Op::Sigmoid(x) => {
                self.acc_if(grads, *x, || dy.zip_map(y, |g, s| g * s * (1.0 - s)).unwrap());
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                self.acc_if(grads, *x, || dy.zip_map(xv, |g, v| g * sign(v)).unwrap());
            }
            Op::Softmax(x, axis) => {
                self.acc_if(grads, *x, || {
                    let (outer, len, inner) = axis_split(y.shape(), *axis).unwrap();
                    let mut dx = Tensor::zeros(y.shape().to_vec());
                    let (yd, gd) = (y.data(), dy.data());
                    let out = dx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
                            for j in 0..len {
                                out[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                    dx
                });
            }
            Op::Transpose(x) => self.acc_if(grads, *x, || dy.transpose().unwrap()),
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc_if(grads, *x, || Tensor::full(shape, dy.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.item() / xv.numel() as f64;
                self.acc_if(grads, *x, || Tensor::full(xv.shape().to_vec(), g));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let r = xv.rows() as f64;
                self.acc_if(grads, *x, || {
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    let c = xv.cols();
                    for row in dx.data_mut().chunks_mut(c) {
                        for (o, &g) in row.iter_mut().zip(dy.data()) {
                            *o = g / r;
                        }
                    }
                    dx
                });
            }
            Op::ConcatCols(parts) => {
                let total = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(pv.numel());
                        for row in dy.data().chunks(total) {
                            data.extend_from_slice(&row[offset..offset + c]);
                        }
                        self.acc(grads, p, Tensor::new(pv.shape().to_vec(), data).unwrap());
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), dy.cols());
                self.acc_if(grads, *x, || {
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for (dst, src) in dx.data_mut().chunks_mut(c).zip(dy.data().chunks(len)) {
                        dst[*start..start + len].copy_from_slice(src);
                    }
                    dx
                });
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let c = xv.cols();
                self.acc_if(grads, *x, || {
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for (src, &dst) in dy.data().chunks(c).zip(idx) {
                        for (o, &v) in dx.data_mut()[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    dx
                });
            }
            Op::ScatterRows(x, idx) => self.acc_if(grads, *x, || dy.gather_rows(idx)),
            Op::Pick(x, idx) => {
                let xv = self.value(*x);
                let c = xv.cols();
                self.acc_if(grads, *x, || {
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for (&(r, col), &g) in idx.iter().zip(dy.data()) {
                        dx.data_mut()[r * c + col] += g;
                    }
                    dx
                });
            }
            Op::LayerNorm { x, eps } => {
                let xv = self.value(*x);
                let c = xv.cols();
                self.acc_if(grads, *x, || {
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for ((out, xr), (yr, gr)) in dx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(xv.data().chunks(c))
                        .zip(y.data().chunks(c).zip(dy.data().chunks(c)))
                    {
                        let (_, rstd) = row_stats(xr, *eps);
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                        for j in 0..c {
                            out[j] = rstd * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    dx
                });
            }
            Op::FrobNormalize(x) => {
                let norm = self.value(*x).frobenius_norm();
                self.acc_if(grads, *x, || {
                    let dot: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
                    dy.zip_map(y, |g, v| (g - v * dot) / norm).unwrap()
                });
            }
            Op::ScalarFn { x, local_grad } => {
                self.acc_if(grads, *x, || local_grad.scale(dy.item()));
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], v: Var, g: impl FnOnce() -> Tensor) {
        if self.requires_grad(v) {
            self.acc(grads, v, g());
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradients of trainable parameters touched by a backward pass. Parameters
    /// that were used but received no gradient get an explicit zero tensor.
    pub fn param_grads(&self, bw: &Backward) -> Gradients {
        let mut out = Gradients::new();
        for (&id, &v) in &self.params {
            if !self.requires_grad(v) {
                continue;
            }
            let g = bw
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
            out.insert(id, g);
        }
        out
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Result of a backward sweep.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
}

impl Backward {
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
