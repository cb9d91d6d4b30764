//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every op applied to its [`Var`] handles in
//! evaluation order, so node inputs always precede the node itself.
//! [`Tape::backward`] walks the nodes once in reverse index order, which
//! fixes the gradient accumulation order and keeps results bit-reproducible.
//!
//! Only nodes that (transitively) depend on a leaf created with
//! `requires_grad = true` receive gradients. Attacks bind the model
//! parameters as constants, so their backward pass never touches weight
//! gradients.
//!
//! `sign` and `clamp` have a zero local derivative. No straight-through
//! estimator is used anywhere.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    MatMul(usize, usize),
    Conv2d(usize, usize, ConvDims),
    MeanPool2(usize),
    ZeroPad(usize, usize),
    Reshape(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sign(usize),
    Clamp(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    SqL2Norm(usize),
    RowSum(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSumExpRows(usize),
    CrossEntropy(usize, Vec<usize>),
    KlDiv(usize, usize),
    Gather(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// The primitive op set, usable through [`Tape::apply`] for generic checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2dValid,
    Relu,
    Sum,
    Mean,
    Clamp { lo: f64, hi: f64 },
    Sign,
    Log,
    Exp,
    SqL2Norm,
}

impl Primitive {
    pub const ALL: [Primitive; 13] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::MatMul,
        Primitive::Conv2dValid,
        Primitive::Relu,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Clamp { lo: -0.5, hi: 0.5 },
        Primitive::Sign,
        Primitive::Log,
        Primitive::Exp,
        Primitive::SqL2Norm,
    ];

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul | Primitive::Conv2dValid => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Splits a tensor into `(rows, last-axis length)`; 1-D tensors are a single row.
fn as_rows(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [k] => Ok((1, *k)),
        [b, k] => Ok((*b, *k)),
        s => Err(Error::shape(op, format!("expected rank 1 or 2, got {s:?}"))),
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Row-wise softmax of a plain tensor (last axis), without recording anything.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let k = *t.shape().last().unwrap_or(&1);
    let mut out = t.clone();
    for (src, dst) in t.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        softmax_row(src, dst);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
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

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar(v.idx));
        }
        Ok(v.idx)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records an input value. Gradients flow to it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape(name, ta, tb)?;
        let value = ta.zip_map(tb, f)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(op(ia, ib), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `(batch, n) + (n)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let n = tb.len();
        if tx.ndim() != 2 || tb.ndim() != 1 || tx.shape()[1] != n {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(Op::AddRowBias(ix, ib), value, rg))
    }

    /// `(batch, c, h, w) + (c)` broadcast over channels.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if tx.ndim() != 4 || tb.ndim() != 1 || tx.shape()[1] != tb.len() {
            return Err(Error::shape(
                "add_channel_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let plane = tx.shape()[2] * tx.shape()[3];
        let c = tb.len();
        let mut value = tx.clone();
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let b = tb.data()[i % c];
            for v in chunk {
                *v += b;
            }
        }
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(Op::AddChannelBias(ix, ib), value, rg))
    }

    /// `(n, k) · (k, m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, k, m) = match (ta.shape(), tb.shape()) {
            ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}"))),
        };
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, k, m, 1.0, ta.data(), (k, 1), tb.data(), (m, 1), 0.0, &mut out);
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::MatMul(ia, ib), value, rg))
    }

    /// Valid-padding, stride-1 convolution. `x: (B, C, H, W)`, `kernel: (O, C, KH, KW)`.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (ix, ik) = (self.check(x)?, self.check(kernel)?);
        let (tx, tk) = (&self.nodes[ix].value, &self.nodes[ik].value);
        let d = match (tx.shape(), tk.shape()) {
            ([b, c, h, w], [o, c2, kh, kw]) if c == c2 && kh <= h && kw <= w => ConvDims {
                batch: *b,
                in_ch: *c,
                h: *h,
                w: *w,
                out_ch: *o,
                kh: *kh,
                kw: *kw,
            },
            (sx, sk) => return Err(Error::shape("conv2d-valid", format!("input {sx:?} with kernel {sk:?}"))),
        };
        let out = kernels::conv2d_forward(tx.data(), tk.data(), &d);
        let value = Tensor::new(vec![d.batch, d.out_ch, d.out_h(), d.out_w()], out)?;
        let rg = self.rg(ix) || self.rg(ik);
        Ok(self.push(Op::Conv2d(ix, ik, d), value, rg))
    }

    /// 2×2, stride-2 mean pooling over the last two axes of a rank-4 tensor.
    pub fn mean_pool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let [b, c, h, w] = match tx.shape() {
            [b, c, h, w] if *h >= 2 && *w >= 2 => [*b, *c, *h, *w],
            s => return Err(Error::shape("mean_pool2", format!("{s:?}"))),
        };
        let out = kernels::mean_pool2_forward(tx.data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        let rg = self.rg(ix);
        Ok(self.push(Op::MeanPool2(ix), value, rg))
    }

    /// Zero-pads the last two axes of a rank-4 tensor by `pad` on each side.
    pub fn zero_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let [b, c, h, w] = match tx.shape() {
            [b, c, h, w] => [*b, *c, *h, *w],
            s => return Err(Error::shape("zero_pad", format!("{s:?}"))),
        };
        let out = kernels::zero_pad_forward(tx.data(), b * c, h, w, pad);
        let value = Tensor::new(vec![b, c, h + 2 * pad, w + 2 * pad], out)?;
        let rg = self.rg(ix);
        Ok(self.push(Op::ZeroPad(ix, pad), value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.clone().reshape(shape)?;
        let rg = self.rg(ix);
        Ok(self.push(Op::Reshape(ix), value, rg))
    }

    fn unary(&mut self, x: Var, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.map(f);
        let rg = self.rg(ix);
        Ok(self.push(op(ix), value, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu, |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp, f64::exp)
    }

    /// Natural log; defined for positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log, f64::ln)
    }

    /// Sign with `sign(0) = 0`; zero gradient.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sign, |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp into `[lo, hi]`; zero gradient.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds [{lo}, {hi}]")));
        }
        self.unary(x, Op::Clamp, move |v| v.clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.map(|v| v * c);
        let rg = self.rg(ix);
        Ok(self.push(Op::Scale(ix, c), value, rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar, move |v| v + c)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        let rg = self.rg(ix);
        Ok(self.push(Op::Sum(ix), Tensor::scalar(s), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(ix);
        Ok(self.push(Op::Mean(ix), Tensor::scalar(s), rg))
    }

    /// Sum of squares of all entries.
    pub fn sq_l2_norm(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().map(|v| v * v).sum();
        let rg = self.rg(ix);
        Ok(self.push(Op::SqL2Norm(ix), Tensor::scalar(s), rg))
    }

    /// `(batch, n) -> (batch)`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let (b, k) = as_rows("row_sum", t)?;
        let out = t.data().chunks(k).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![b], out)?;
        let rg = self.rg(ix);
        Ok(self.push(Op::RowSum(ix), value, rg))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, z: Var, axis: usize) -> Result<Var> {
        let iz = self.check(z)?;
        let t = &self.nodes[iz].value;
        if axis >= t.ndim() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for shape {:?}", t.shape()),
            ));
        }
        let len = t.shape()[axis];
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut value = t.clone();
        let mut buf_in = vec![0.0; len];
        let mut buf_out = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf_in.iter_mut().enumerate() {
                    *b = t.data()[(o * len + j) * inner + i];
                }
                softmax_row(&buf_in, &mut buf_out);
                for (j, &b) in buf_out.iter().enumerate() {
                    value.data_mut()[(o * len + j) * inner + i] = b;
                }
            }
        }
        let rg = self.rg(iz);
        Ok(self.push(
            Op::Softmax {
                x: iz,
                outer,
                len,
                inner,
            },
            value,
            rg,
        ))
    }

    /// Softmax over the last axis of a rank-1 or rank-2 tensor.
    pub fn softmax_rows(&mut self, z: Var) -> Result<Var> {
        let nd = self.value(z).ndim();
        if nd == 0 {
            return Err(Error::shape("softmax", "scalar input"));
        }
        self.softmax(z, nd - 1)
    }

    /// Row-wise `log Σ exp`: `(batch, n) -> (batch)`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let (b, k) = as_rows("log_sum_exp", t)?;
        let out = t
            .data()
            .chunks(k)
            .map(|r| {
                let m = r.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let value = Tensor::new(vec![b], out)?;
        let rg = self.rg(ix);
        Ok(self.push(Op::LogSumExpRows(ix), value, rg))
    }

    /// Per-row cross-entropy `−log softmax(z)_y`: `(batch, κ) -> (batch)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let t = &self.nodes[il].value;
        let (b, k) = as_rows("cross_entropy", t)?;
        if labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{b} rows but {} labels", labels.len()),
            ));
        }
        let mut out = Vec::with_capacity(b);
        let mut lp = vec![0.0; k];
        for (row, &y) in t.data().chunks(k).zip(labels) {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
            log_softmax_row(row, &mut lp);
            out.push(-lp[y]);
        }
        let value = Tensor::new(vec![b], out)?;
        let rg = self.rg(il);
        Ok(self.push(Op::CrossEntropy(il, labels.to_vec()), value, rg))
    }

    /// Mean cross-entropy over the batch (a scalar).
    pub fn ce_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let per = self.cross_entropy(logits, labels)?;
        self.mean(per)
    }

    /// Per-row `KL(softmax(p) ∥ softmax(q))`: `(batch, κ) -> (batch)`.
    pub fn kl_div(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (ip, iq) = (self.check(p_logits)?, self.check(q_logits)?);
        let (tp, tq) = (&self.nodes[ip].value, &self.nodes[iq].value);
        same_shape("kl_div", tp, tq)?;
        let (b, k) = as_rows("kl_div", tp)?;
        let mut lp = vec![0.0; k];
        let mut lq = vec![0.0; k];
        let out = tp
            .data()
            .chunks(k)
            .zip(tq.data().chunks(k))
            .map(|(rp, rq)| {
                log_softmax_row(rp, &mut lp);
                log_softmax_row(rq, &mut lq);
                let kl: f64 = lp.iter().zip(&lq).map(|(a, c)| a.exp() * (a - c)).sum();
                kl.max(0.0)
            })
            .collect();
        let value = Tensor::new(vec![b], out)?;
        let rg = self.rg(ip) || self.rg(iq);
        Ok(self.push(Op::KlDiv(ip, iq), value, rg))
    }

    /// Batch-mean KL divergence (a scalar).
    pub fn kl_loss(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let per = self.kl_div(p_logits, q_logits)?;
        self.mean(per)
    }

    /// Picks entry `idx[i]` from row `i`: `(batch, κ) -> (batch)`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let (b, k) = as_rows("gather", t)?;
        if idx.len() != b {
            return Err(Error::shape("gather", format!("{b} rows, {} indices", idx.len())));
        }
        let mut out = Vec::with_capacity(b);
        for (row, &j) in t.data().chunks(k).zip(idx) {
            if j >= k {
                return Err(Error::LabelOutOfRange { label: j, classes: k });
            }
            out.push(row[j]);
        }
        let value = Tensor::new(vec![b], out)?;
        let rg = self.rg(ix);
        Ok(self.push(Op::Gather(ix, idx.to_vec()), value, rg))
    }

    /// Applies one of the registered primitives by kind.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        let a = inputs[0];
        match kind {
            Primitive::Add => self.add(a, inputs[1]),
            Primitive::Sub => self.sub(a, inputs[1]),
            Primitive::Mul => self.mul(a, inputs[1]),
            Primitive::MatMul => self.matmul(a, inputs[1]),
            Primitive::Conv2dValid => self.conv2d(a, inputs[1]),
            Primitive::Relu => self.relu(a),
            Primitive::Sum => self.sum(a),
            Primitive::Mean => self.mean(a),
            Primitive::Clamp { lo, hi } => self.clamp(a, lo, hi),
            Primitive::Sign => self.sign(a),
            Primitive::Log => self.log(a),
            Primitive::Exp => self.exp(a),
            Primitive::SqL2Norm => self.sq_l2_norm(a),
        }
    }

    /// Gradients of the scalar `root` w.r.t. each of `wrt`, in order.
    ///
    /// Variables the root does not depend on (or that were recorded without
    /// `requires_grad`) get zero gradients.
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let ir = self.check(root)?;
        for &w in wrt {
            self.check(w)?;
        }
        let root_val = &self.nodes[ir].value;
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; ir + 1];
        grads[ir] = Some(vec![1.0]);

        for i in (0..=ir).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|w| {
                let shape = self.nodes[w.idx].value.shape().to_vec();
                match grads.get(w.idx).and_then(Option::as_ref) {
                    Some(g) if self.nodes[w.idx].requires_grad => {
                        Tensor::new(shape, g.clone()).expect("gradient shape")
                    }
                    _ => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let acc = |j: usize, contrib: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.to_vec(), grads);
                }
                if self.rg(*b) {
                    acc(*b, g.to_vec(), grads);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.to_vec(), grads);
                }
                if self.rg(*b) {
                    acc(*b, g.iter().map(|v| -v).collect(), grads);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let c = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    acc(*a, c, grads);
                }
                if self.rg(*b) {
                    let c = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    acc(*b, c, grads);
                }
            }
            Op::AddRowBias(x, b) => {
                if self.rg(*x) {
                    acc(*x, g.to_vec(), grads);
                }
                if self.rg(*b) {
                    let n = val(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, gb, grads);
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.rg(*x) {
                    acc(*x, g.to_vec(), grads);
                }
                if self.rg(*b) {
                    let s = val(*x).shape();
                    let (c, plane) = (s[1], s[2] * s[3]);
                    let mut gb = vec![0.0; c];
                    for (k, chunk) in g.chunks(plane).enumerate() {
                        gb[k % c] += chunk.iter().sum::<f64>();
                    }
                    acc(*b, gb, grads);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; n * k];
                    kernels::gemm(n, m, k, 1.0, g, (m, 1), tb.data(), (1, m), 0.0, &mut ga);
                    acc(*a, ga, grads);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * m];
                    kernels::gemm(k, n, m, 1.0, ta.data(), (1, k), g, (m, 1), 0.0, &mut gb);
                    acc(*b, gb, grads);
                }
            }
            Op::Conv2d(x, kernel, d) => {
                let (gx, gk) =
                    kernels::conv2d_backward(val(*x).data(), val(*kernel).data(), g, d, self.rg(*x), self.rg(*kernel));
                if let Some(gx) = gx {
                    acc(*x, gx, grads);
                }
                if let Some(gk) = gk {
                    acc(*kernel, gk, grads);
                }
            }
            Op::MeanPool2(x) => {
                let s = val(*x).shape();
                acc(*x, kernels::mean_pool2_backward(g, s[0] * s[1], s[2], s[3]), grads);
            }
            Op::ZeroPad(x, pad) => {
                let s = val(*x).shape();
                acc(*x, kernels::zero_pad_backward(g, s[0] * s[1], s[2], s[3], *pad), grads);
            }
            Op::Reshape(x) => acc(*x, g.to_vec(), grads),
            Op::Relu(x) => {
                let c = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, c, grads);
            }
            Op::Exp(x) => {
                let c = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                acc(*x, c, grads);
            }
            Op::Log(x) => {
                let c = g.iter().zip(val(*x).data()).map(|(g, v)| g / v).collect();
                acc(*x, c, grads);
            }
            Op::Sign(x) | Op::Clamp(x) => acc(*x, vec![0.0; g.len()], grads),
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect(), grads),
            Op::AddScalar(x) => acc(*x, g.to_vec(), grads),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()], grads),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n], grads);
            }
            Op::SqL2Norm(x) => {
                let c = val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect();
                acc(*x, c, grads);
            }
            Op::RowSum(x) => {
                let t = val(*x);
                let k = t.len() / g.len().max(1);
                let mut c = Vec::with_capacity(t.len());
                for gi in g {
                    c.extend(std::iter::repeat_n(*gi, k));
                }
                acc(*x, c, grads);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut c = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            c[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*x, c, grads);
            }
            Op::LogSumExpRows(x) => {
                let t = val(*x);
                let k = t.len() / g.len().max(1);
                let mut c = Vec::with_capacity(t.len());
                for ((row, gi), lse) in t.data().chunks(k).zip(g).zip(node.value.data()) {
                    c.extend(row.iter().map(|v| gi * (v - lse).exp()));
                }
                acc(*x, c, grads);
            }
            Op::CrossEntropy(x, labels) => {
                // ∂/∂z (−log p_y) = p − one_hot(y)
                let t = val(*x);
                let k = t.len() / labels.len();
                let mut c = vec![0.0; t.len()];
                for (r, (row, &y)) in t.data().chunks(k).zip(labels).enumerate() {
                    let out = &mut c[r * k..(r + 1) * k];
                    softmax_row(row, out);
                    out[y] -= 1.0;
                    for v in out.iter_mut() {
                        *v *= g[r];
                    }
                }
                acc(*x, c, grads);
            }
            Op::KlDiv(p, q) => {
                let (tp, tq) = (val(*p), val(*q));
                let b = g.len();
                let k = tp.len() / b;
                let mut gp = vec![0.0; tp.len()];
                let mut gq = vec![0.0; tp.len()];
                let mut lp = vec![0.0; k];
                let mut lq = vec![0.0; k];
                for r in 0..b {
                    log_softmax_row(&tp.data()[r * k..(r + 1) * k], &mut lp);
                    log_softmax_row(&tq.data()[r * k..(r + 1) * k], &mut lq);
                    let kl: f64 = lp.iter().zip(&lq).map(|(a, c)| a.exp() * (a - c)).sum();
                    for j in 0..k {
                        let (pj, qj) = (lp[j].exp(), lq[j].exp());
                        gp[r * k + j] = g[r] * pj * (lp[j] - lq[j] - kl);
                        gq[r * k + j] = g[r] * (qj - pj);
                    }
                }
                if self.rg(*p) {
                    acc(*p, gp, grads);
                }
                if self.rg(*q) {
                    acc(*q, gq, grads);
                }
            }
            Op::Gather(x, idx) => {
                let t = val(*x);
                let k = t.len() / idx.len();
                let mut c = vec![0.0; t.len()];
                for (r, &j) in idx.iter().enumerate() {
                    c[r * k + j] = g[r];
                }
                acc(*x, c, grads);
            }
        }
    }
}
