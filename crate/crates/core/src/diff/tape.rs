//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so every input index is smaller
//! than the index of the node consuming it and the reverse index order is a
//! reverse topological order.

use rand::Rng;

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    RowNormalize(Var),
    Transpose(Var),
    Reshape(Var),
    VStack(Vec<Var>),
    BlockMatMul {
        a: Var,
        b: Var,
        blocks: usize,
    },
    GruGate {
        x: Var,
        hp: Var,
        h: Var,
        mask: Vec<f64>,
        r: Vec<f64>,
        z: Vec<f64>,
        n: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients, shaped like the parameters of the store they
/// were computed against.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Records primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    stochastic: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Mode::Eval)
    }
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            mode,
            stochastic: false,
        }
    }

    pub fn training() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// True once any random mask has been applied on this tape.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
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

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let needs_grad = self.op_needs_grad(&kind);
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => {
                self.ng(*a) || self.ng(*b)
            }
            Op::Affine(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Clamp(x, _, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Dropout { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::RowNormalize(x)
            | Op::Transpose(x)
            | Op::Reshape(x) => self.ng(*x),
            Op::VStack(parts) => parts.iter().any(|p| self.ng(*p)),
            Op::BlockMatMul { a, b, .. } => self.ng(*a) || self.ng(*b),
            Op::GruGate { x, hp, h, .. } => self.ng(*x) || self.ng(*hp) || self.ng(*h),
            Op::LayerNorm { x, gain, bias, .. } => self.ng(*x) || self.ng(*gain) || self.ng(*bias),
            Op::Concat(parts) => parts.iter().any(|p| self.ng(*p)),
            Op::Gather { src, .. } => self.ng(*src),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push("constant", value, Op::Leaf)
    }

    /// Binds a parameter; repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return Ok(v);
        }
        let v = self.push("param", store.get(id).clone(), Op::Param(id))?;
        self.param_vars[id.index()] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(Broadcast::Same)
        } else if bv.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            Ok(Broadcast::Row)
        } else if bv.cols() == 1 && bv.rows() == av.rows() && av.shape().len() == 2 {
            Ok(Broadcast::Col)
        } else {
            Err(mismatch(op, av, bv))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var, TensorError> {
        let bc = self.broadcast(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let cols = av.cols();
        let data: Vec<f64> = match bc {
            Broadcast::Same => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => {
                let y = bv.item();
                av.data().iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::Row => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % cols]))
                .collect(),
            Broadcast::Col => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i / cols]))
                .collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, make(a, b, bc))
    }

    /// Elementwise sum; `b` may broadcast as a `[1, cols]` row, a `[rows, 1]`
    /// column, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push("affine", value, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        self.affine(x, factor, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(f64::exp);
        self.push("exp", value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(f64::ln);
        self.push("log", value, Op::Log(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp(x, lo, hi))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x))
    }

    /// Per-row layer normalization with learnable gain and bias of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let cols = xv.cols();
        if gv.len() != cols {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.len() != cols {
            return Err(mismatch("layer_norm", xv, bv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Concatenates along the last dimension; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat", self.value(first), self.value(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat", value, Op::Concat(parts.to_vec()))
    }

    /// Flat gather: `out[k] = src[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var, TensorError> {
        let sv = self.value(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= sv.len()) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: sv.len(),
            });
        }
        let data = index.iter().map(|&i| sv.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather { src, index })
    }

    /// Row lookup: the result has one row per entry of `rows`.
    pub fn rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (n, cols) = (tv.rows(), tv.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                len: n,
            });
        }
        let index = rows
            .iter()
            .flat_map(|&r| (r * cols)..((r + 1) * cols))
            .collect();
        self.gather(table, index, vec![rows.len(), cols])
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push("mean", value, Op::Mean(x))
    }

    /// Divides each row by its sum; rows summing to zero stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("row_normalize", value, Op::RowNormalize(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(x))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let data = self.value(x).data().to_vec();
        let value = Tensor::new(shape, data)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Concatenates along the first dimension; all parts need the same width.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("vstack of zero tensors".into()))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols || pv.shape().len() != 2 {
                return Err(mismatch("vstack", self.value(first), pv));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("vstack", value, Op::VStack(parts.to_vec()))
    }

    /// Block-diagonal product: `a` stacks `blocks` matrices of shape p×q,
    /// `b` stacks `blocks` matrices of shape q×r; block `i` of the result is
    /// `a_i · b_i`.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if blocks == 0
            || av.shape().len() != 2
            || bv.shape().len() != 2
            || av.rows() % blocks != 0
            || bv.rows() % blocks != 0
            || av.cols() != bv.rows() / blocks
        {
            return Err(mismatch("block_matmul", av, bv));
        }
        let (p, q, r) = (av.rows() / blocks, av.cols(), bv.cols());
        let mut out = vec![0.0; blocks * p * r];
        for i in 0..blocks {
            gemm(
                p,
                q,
                r,
                &av.data()[i * p * q..(i + 1) * p * q],
                false,
                &bv.data()[i * q * r..(i + 1) * q * r],
                false,
                &mut out[i * p * r..(i + 1) * p * r],
                false,
            );
        }
        let value = Tensor::new(vec![blocks * p, r], out)?;
        self.push("block_matmul", value, Op::BlockMatMul { a, b, blocks })
    }

    /// Gated recurrent update for a batch of rows.
    ///
    /// `x` and `hp` are the input and state projections (`[B, 3d]`, gate
    /// order reset, update, candidate, biases included); `h` is the previous
    /// state `[B, d]`. Rows whose `mask` entry is 0 keep `h` unchanged.
    pub fn gru_gate(&mut self, x: Var, hp: Var, h: Var, mask: &[f64]) -> Result<Var, TensorError> {
        let (xv, pv, hv) = (self.value(x), self.value(hp), self.value(h));
        let (b, d) = (hv.rows(), hv.cols());
        if xv.shape() != [b, 3 * d] || pv.shape() != [b, 3 * d] || mask.len() != b {
            return Err(mismatch("gru_gate", xv, hv));
        }
        let mut r = vec![0.0; b * d];
        let mut z = vec![0.0; b * d];
        let mut n = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            let xr = &xv.data()[i * 3 * d..(i + 1) * 3 * d];
            let pr = &pv.data()[i * 3 * d..(i + 1) * 3 * d];
            for c in 0..d {
                let k = i * d + c;
                let rv = sigmoid(xr[c] + pr[c]);
                let zv = sigmoid(xr[d + c] + pr[d + c]);
                let nv = (xr[2 * d + c] + rv * pr[2 * d + c]).tanh();
                let hprev = hv.data()[k];
                let hnew = (1.0 - zv) * nv + zv * hprev;
                r[k] = rv;
                z[k] = zv;
                n[k] = nv;
                out[k] = mask[i] * hnew + (1.0 - mask[i]) * hprev;
            }
        }
        let value = Tensor::new(vec![b, d], out)?;
        self.push(
            "gru_gate",
            value,
            Op::GruGate {
                x,
                hp,
                h,
                mask: mask.to_vec(),
                r,
                z,
                n,
            },
        )
    }

    /// Reverse pass from a single-element output. Parameters that are not
    /// ancestors of `out` receive zero gradients.
    pub fn backward(&self, out: Var, store: &ParamStore) -> Result<Gradients, TensorError> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: ov.shape().to_vec(),
            });
        }
        let mut result = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut result)?;
        }
        Ok(result)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        result: &mut Gradients,
    ) -> Result<(), TensorError> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let dst = result.grads.get_mut(id.index()).ok_or_else(|| {
                    TensorError::Invalid("gradient requested against a different parameter store".into())
                })?;
                if dst.len() != g.len() {
                    return Err(TensorError::Invalid(
                        "gradient requested against a different parameter store".into(),
                    ));
                }
                dst.data_mut().iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.ng(*a) {
                    let ga = self.acc(grads, *a);
                    gemm(m, n, k, g, false, bv.data(), true, ga, true);
                }
                if self.ng(*b) {
                    let gb = self.acc(grads, *b);
                    gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    let ga = self.acc(grads, *a);
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if self.ng(*b) {
                    let cols = node.value.cols();
                    let gb = self.acc(grads, *b);
                    reduce_into(gb, g, *bc, cols, |k| sign * g[k]);
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = node.value.cols();
                if self.ng(*a) {
                    let ga = self.acc(grads, *a);
                    for (k, d) in ga.iter_mut().enumerate() {
                        let bk = match bc {
                            Broadcast::Same => bv.data()[k],
                            Broadcast::Scalar => bv.item(),
                            Broadcast::Row => bv.data()[k % cols],
                            Broadcast::Col => bv.data()[k / cols],
                        };
                        *d += g[k] * bk;
                    }
                }
                if self.ng(*b) {
                    let gb = self.acc(grads, *b);
                    reduce_into(gb, g, *bc, cols, |k| g[k] * av.data()[k]);
                }
            }
            Op::Affine(x, s) => {
                let gx = self.acc(grads, *x);
                gx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
            Op::Sigmoid(x) => {
                let gx = self.acc(grads, *x);
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
            Op::Tanh(x) => {
                let gx = self.acc(grads, *x);
                for k in 0..g.len() {
                    gx[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = self.acc(grads, *x);
                for k in 0..g.len() {
                    if xv[k] > 0.0 {
                        gx[k] += g[k];
                    }
                }
            }
            Op::Exp(x) => {
                let gx = self.acc(grads, *x);
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k];
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let gx = self.acc(grads, *x);
                for k in 0..g.len() {
                    gx[k] += g[k] / xv[k];
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let gx = self.acc(grads, *x);
                for k in 0..g.len() {
                    if xv[k] > *lo && xv[k] < *hi {
                        gx[k] += g[k];
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let gx = self.acc(grads, *x);
                for r in 0..node.value.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = span.clone().map(|k| g[k] * y[k]).sum();
                    for k in span {
                        gx[k] += y[k] * (g[k] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                let gx = self.acc(grads, *x);
                for r in 0..node.value.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let total: f64 = span.clone().map(|k| g[k]).sum();
                    for k in span {
                        gx[k] += g[k] - y[k].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let gain_v = self.value(*gain).data();
                if self.ng(*gain) {
                    let gg = self.acc(grads, *gain);
                    for k in 0..g.len() {
                        gg[k % cols] += g[k] * xhat[k];
                    }
                }
                if self.ng(*bias) {
                    let gb = self.acc(grads, *bias);
                    for k in 0..g.len() {
                        gb[k % cols] += g[k];
                    }
                }
                if self.ng(*x) {
                    let gx = self.acc(grads, *x);
                    let n = cols as f64;
                    for r in 0..rows {
                        let base = r * cols;
                        let mut sum_gh = 0.0;
                        let mut sum_gh_xh = 0.0;
                        for c in 0..cols {
                            let gh = g[base + c] * gain_v[c];
                            sum_gh += gh;
                            sum_gh_xh += gh * xhat[base + c];
                        }
                        for c in 0..cols {
                            let gh = g[base + c] * gain_v[c];
                            gx[base + c] +=
                                inv_std[r] / n * (n * gh - sum_gh - xhat[base + c] * sum_gh_xh);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let gp = self.acc(grads, p);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { src, index } => {
                let gs = self.acc(grads, *src);
                for (k, &i) in index.iter().enumerate() {
                    gs[i] += g[k];
                }
            }
            Op::Dropout { x, mask } => {
                let gx = self.acc(grads, *x);
                for k in 0..g.len() {
                    gx[k] += g[k] * mask[k];
                }
            }
            Op::Sum(x) => {
                let gx = self.acc(grads, *x);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let gx = self.acc(grads, *x);
                let scale = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += scale);
            }
            Op::RowNormalize(x) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let gx = self.acc(grads, *x);
                for r in 0..xv.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let s: f64 = xv.data()[span.clone()].iter().sum();
                    if s == 0.0 {
                        continue;
                    }
                    let dot: f64 = span.clone().map(|k| g[k] * y[k]).sum();
                    for k in span {
                        gx[k] += (g[k] - dot) / s;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let gx = self.acc(grads, *x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = self.acc(grads, *x);
                gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let gp = self.acc(grads, p);
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, v)| *d += v);
                    }
                    offset += len;
                }
            }
            Op::BlockMatMul { a, b, blocks } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q, r) = (av.rows() / blocks, av.cols(), bv.cols());
                if self.ng(*a) {
                    let ga = self.acc(grads, *a);
                    for i in 0..*blocks {
                        gemm(
                            p,
                            r,
                            q,
                            &g[i * p * r..(i + 1) * p * r],
                            false,
                            &bv.data()[i * q * r..(i + 1) * q * r],
                            true,
                            &mut ga[i * p * q..(i + 1) * p * q],
                            true,
                        );
                    }
                }
                if self.ng(*b) {
                    let gb = self.acc(grads, *b);
                    for i in 0..*blocks {
                        gemm(
                            q,
                            p,
                            r,
                            &av.data()[i * p * q..(i + 1) * p * q],
                            true,
                            &g[i * p * r..(i + 1) * p * r],
                            false,
                            &mut gb[i * q * r..(i + 1) * q * r],
                            true,
                        );
                    }
                }
            }
            Op::GruGate {
                x,
                hp,
                h,
                mask,
                r,
                z,
                n,
            } => {
                let hv = self.value(*h).data();
                let pv = self.value(*hp).data();
                let d = self.value(*h).cols();
                let b = mask.len();
                // Pre-activation gradients in [reset, update, candidate] order.
                let mut ga_x = vec![0.0; b * 3 * d];
                let mut ga_hp = vec![0.0; b * 3 * d];
                let mut gh = vec![0.0; b * d];
                for i in 0..b {
                    for c in 0..d {
                        let k = i * d + c;
                        let gnew = mask[i] * g[k];
                        gh[k] = (1.0 - mask[i]) * g[k] + gnew * z[k];
                        let gn = gnew * (1.0 - z[k]) * (1.0 - n[k] * n[k]);
                        let gz = gnew * (hv[k] - n[k]) * z[k] * (1.0 - z[k]);
                        let pn = pv[i * 3 * d + 2 * d + c];
                        let gr = gn * pn * r[k] * (1.0 - r[k]);
                        let base = i * 3 * d;
                        ga_x[base + c] = gr;
                        ga_x[base + d + c] = gz;
                        ga_x[base + 2 * d + c] = gn;
                        ga_hp[base + c] = gr;
                        ga_hp[base + d + c] = gz;
                        ga_hp[base + 2 * d + c] = gn * r[k];
                    }
                }
                if self.ng(*x) {
                    let gx = self.acc(grads, *x);
                    gx.iter_mut().zip(&ga_x).for_each(|(d, v)| *d += v);
                }
                if self.ng(*hp) {
                    let gp = self.acc(grads, *hp);
                    gp.iter_mut().zip(&ga_hp).for_each(|(d, v)| *d += v);
                }
                if self.ng(*h) {
                    let gx = self.acc(grads, *h);
                    gx.iter_mut().zip(&gh).for_each(|(d, v)| *d += v);
                }
            }
        }
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn reduce_into(dst: &mut [f64], g: &[f64], bc: Broadcast, cols: usize, term: impl Fn(usize) -> f64) {
    match bc {
        Broadcast::Same => (0..g.len()).for_each(|k| dst[k] += term(k)),
        Broadcast::Scalar => dst[0] += (0..g.len()).map(term).sum::<f64>(),
        Broadcast::Row => (0..g.len()).for_each(|k| dst[k % cols] += term(k)),
        Broadcast::Col => (0..g.len()).for_each(|k| dst[k / cols] += term(k)),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
