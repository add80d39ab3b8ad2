//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every op appends one record to the [`Tape`]; records only reference
//! earlier records, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use std::rc::Rc;

use rand::Rng;

use super::kernels::{self, block, Exec};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Layer-norm epsilon added to the variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean mask over the trailing `rows x cols` block of a tensor.
#[derive(Debug, Clone)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Rc<Vec<bool>>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[allowed.len()]));
        }
        Ok(Self {
            rows,
            cols,
            allowed: Rc::new(allowed),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    SumAll(Var),
    SumLast(Var),
    MeanAxis1 {
        x: Var,
        mid: usize,
        inner: usize,
    },
    Reshape(Var),
    Permute0213 {
        x: Var,
        dims: [usize; 4],
    },
    PairwiseDiff(Var),
    Expand(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops together with their values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<Option<Var>>,
    exec: Exec,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            exec,
            ..Self::default()
        }
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf that is not backed by a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter snapshot as a differentiable leaf. Binding the same
    /// parameter twice returns the first handle, so every use of a shared
    /// weight feeds one gradient slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        v
    }

    /// `a[.. x k] . b[k x n]`, treating all leading axes of `a` as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.exec, self.data(a), self.data(b), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), needs)
    }

    /// Batched product over matching leading axes: `a[.., m, k] . b[.., k, n]`,
    /// or `a . b^T` with `b[.., n, k]` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        kernels::for_each_block(self.exec, &mut out, batch, |i, o| {
            let ab = &ad[i * m * k..(i + 1) * m * k];
            let bb = &bd[i * k * n..(i + 1) * k * n];
            if trans_b {
                block::gemm_nt_acc(ab, bb, m, k, n, o);
            } else {
                block::gemm_acc(ab, bb, m, k, n, o);
            }
        });
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        let op = Op::BatchMatMul {
            a,
            b,
            trans_b,
            batch,
            m,
            k,
            n,
        };
        self.push("batch_matmul", Tensor::new(shape, out)?, op, needs)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, Tensor::new(shape, out)?, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn trailing_check(&self, name: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(name, sa, sb));
        }
        Ok(self.value(b).len())
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let w = self.trailing_check("add_broadcast", a, b)?;
        let bd = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % w])
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push("add_broadcast", Tensor::new(shape, out)?, Op::AddBroadcast(a, b), needs)
    }

    /// `a * b` where `b`'s shape equals the trailing axes of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let w = self.trailing_check("mul_broadcast", a, b)?;
        let bd = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % w])
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push("mul_broadcast", Tensor::new(shape, out)?, Op::MulBroadcast(a, b), needs)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(name, Tensor::new(shape, out)?, op, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, f64::ln, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Row-wise softmax over the last axis with max-subtraction.
    ///
    /// `mask` covers the trailing two axes and is broadcast over the leading
    /// ones; masked entries come out as exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or(Error::EmptyAxis { op: "softmax" })?;
        if cols == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        if let Some(mk) = mask {
            let r = shape.len();
            if r < 2 || shape[r - 2] != mk.rows || shape[r - 1] != mk.cols {
                return Err(Error::shape("softmax", &shape, &[mk.rows, mk.cols]));
            }
        }
        let xd = self.data(x);
        let rows = xd.len() / cols;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let mrow = mask.map(|mk| r % mk.rows);
            let allowed = |j: usize| match (mask, mrow) {
                (Some(mk), Some(i)) => mk.allows(i, j),
                _ => true,
            };
            let xr = &xd[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in xr.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: mrow.unwrap_or(r) });
            }
            let or = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (j, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
                if allowed(j) {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in or.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(x);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax(x), needs)
    }

    /// Normalizes each trailing-axis vector to zero mean and unit variance,
    /// then applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", Tensor::new(shape, out)?, op, needs)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.data(x).iter().zip(&keep).map(|(v, k)| v * k).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push("dropout", Tensor::new(shape, out)?, Op::Dropout(x, keep), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyAxis { op: "mean" });
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::EmptyAxis { op: "sum_last" });
        }
        let out: Vec<f64> = self.data(x).chunks(c).map(|r| r.iter().sum()).collect();
        let mut new_shape = shape[..shape.len() - 1].to_vec();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let needs = self.needs(x);
        self.push("sum_last", Tensor::new(new_shape, out)?, Op::SumLast(x), needs)
    }

    /// Mean over axis 1 of a rank-3 tensor `[outer, mid, inner]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] == 0 {
            return Err(Error::shape("mean_axis1", &shape, &[]));
        }
        let (outer, mid, inner) = (shape[0], shape[1], shape[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..mid {
                let src = &xd[(o * mid + j) * inner..(o * mid + j + 1) * inner];
                for (t, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *t += s;
                }
            }
        }
        let inv = 1.0 / mid as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let needs = self.needs(x);
        let op = Op::MeanAxis1 { x, mid, inner };
        self.push("mean_axis1", Tensor::new(vec![outer, inner], out)?, op, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        self.push("reshape", t, Op::Reshape(x), needs)
    }

    /// `[a, b, c, d] -> [a, c, b, d]`
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("permute_0213", &s, &[4]));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = permute_0213_data(self.data(x), dims);
        let needs = self.needs(x);
        let op = Op::Permute0213 { x, dims };
        self.push("permute_0213", Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?, op, needs)
    }

    /// `[b, l] -> [b, l, l]` with entry `(r, s) = x[r] - x[s]`.
    pub fn pairwise_diff(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("pairwise_diff", &s, &[2]));
        }
        let (b, l) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; b * l * l];
        for i in 0..b {
            let xr = &xd[i * l..(i + 1) * l];
            for r in 0..l {
                for c in 0..l {
                    out[(i * l + r) * l + c] = xr[r] - xr[c];
                }
            }
        }
        let needs = self.needs(x);
        self.push("pairwise_diff", Tensor::new(vec![b, l, l], out)?, Op::PairwiseDiff(x), needs)
    }

    /// Repeats `x` along a new leading axis of size `batch`.
    pub fn expand(&mut self, x: Var, batch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(batch * xd.len());
        for _ in 0..batch {
            out.extend_from_slice(xd);
        }
        let mut shape = vec![batch];
        shape.extend(s);
        let needs = self.needs(x);
        self.push("expand", Tensor::new(shape, out)?, Op::Expand(x), needs)
    }

    /// Reverse sweep from a scalar `loss`. Gradients from earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter leaf bound on this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => self.grads.get(i).and_then(|g| g.as_deref()).map(|g| (id, g)),
            _ => None,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let exec = self.exec;
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                if self.needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(exec, g, self.data(*b), m, n, k, ga);
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let gb = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(exec, ad, g, m, k, n, gb);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let ga = slot(grads, *a, batch * m * k);
                    kernels::for_each_block(exec, ga, *batch, |i, o| {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bd[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            block::gemm_acc(gb, bb, m, n, k, o);
                        } else {
                            block::gemm_nt_acc(gb, bb, m, n, k, o);
                        }
                    });
                }
                if self.needs(*b) {
                    let gbuf = slot(grads, *b, batch * k * n);
                    kernels::for_each_block(exec, gbuf, *batch, |i, o| {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &ad[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            block::gemm_tn_acc(gb, ab, m, n, k, o);
                        } else {
                            block::gemm_tn_acc(ab, gb, m, k, n, o);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, |i| g[i]);
                self.acc_map(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, |i| g[i]);
                self.acc_map(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc_map(grads, *a, |i| g[i] * bd[i]);
                self.acc_map(grads, *b, |i| g[i] * ad[i]);
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                self.acc_map(grads, *a, |i| g[i] / bd[i]);
                self.acc_map(grads, *b, |i| -g[i] * out[i] / bd[i]);
            }
            Op::AddBroadcast(a, b) => {
                self.acc_map(grads, *a, |i| g[i]);
                if self.needs(*b) {
                    let w = self.value(*b).len();
                    let gb = slot(grads, *b, w);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % w] += gv;
                    }
                }
            }
            Op::MulBroadcast(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let w = bd.len();
                self.acc_map(grads, *a, |i| g[i] * bd[i % w]);
                if self.needs(*b) {
                    let gb = slot(grads, *b, w);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % w] += gv * ad[i];
                    }
                }
            }
            Op::Scale(x, c) => self.acc_map(grads, *x, |i| g[i] * c),
            Op::AddScalar(x) => self.acc_map(grads, *x, |i| g[i]),
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.acc_map(grads, *x, |i| if xd[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(x) => self.acc_map(grads, *x, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Exp(x) => self.acc_map(grads, *x, |i| g[i] * out[i]),
            Op::Ln(x) => {
                let xd = self.data(*x);
                self.acc_map(grads, *x, |i| g[i] / xd[i]);
            }
            Op::Square(x) => {
                let xd = self.data(*x);
                self.acc_map(grads, *x, |i| 2.0 * xd[i] * g[i]);
            }
            Op::Sqrt(x) => self.acc_map(grads, *x, |i| g[i] * 0.5 / out[i]),
            Op::Clamp(x, lo, hi) => {
                let xd = self.data(*x);
                self.acc_map(grads, *x, |i| {
                    if xd[i] >= *lo && xd[i] <= *hi {
                        g[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let cols = node.value.last_dim();
                    let gx = slot(grads, *x, out.len());
                    for r in 0..out.len() / cols {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += y[j] * (gr[j] - dot);
                        }
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
                let d = node.value.last_dim();
                let gd = self.data(*gain);
                if self.needs(*x) {
                    let gx = slot(grads, *x, out.len());
                    for (r, &is) in inv_std.iter().enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            gx[r * d + j] += is * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
                if self.needs(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (i, &gv) in g.iter().enumerate() {
                        gg[i % d] += gv * xhat[i];
                    }
                }
                if self.needs(*bias) {
                    let gb = slot(grads, *bias, d);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                }
            }
            Op::Dropout(x, keep) => self.acc_map(grads, *x, |i| g[i] * keep[i]),
            Op::SumAll(x) => self.acc_map(grads, *x, |_| g[0]),
            Op::SumLast(x) => {
                let c = self.value(*x).last_dim();
                self.acc_map(grads, *x, |i| g[i / c]);
            }
            Op::MeanAxis1 { x, mid, inner } => {
                let inv = 1.0 / *mid as f64;
                let (mid, inner) = (*mid, *inner);
                self.acc_map(grads, *x, |i| {
                    let o = i / (mid * inner);
                    let t = i % inner;
                    g[o * inner + t] * inv
                });
            }
            Op::Reshape(x) => self.acc_map(grads, *x, |i| g[i]),
            Op::Permute0213 { x, dims } => {
                if self.needs(*x) {
                    let back = permute_0213_data(g, [dims[0], dims[2], dims[1], dims[3]]);
                    self.acc_map(grads, *x, |i| back[i]);
                }
            }
            Op::PairwiseDiff(x) => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    let (b, l) = (s[0], s[1]);
                    let gx = slot(grads, *x, b * l);
                    for i in 0..b {
                        for r in 0..l {
                            for c in 0..l {
                                let gv = g[(i * l + r) * l + c];
                                gx[i * l + r] += gv;
                                gx[i * l + c] -= gv;
                            }
                        }
                    }
                }
            }
            Op::Expand(x) => {
                if self.needs(*x) {
                    let w = self.value(*x).len();
                    let gx = slot(grads, *x, w);
                    for (i, &gv) in g.iter().enumerate() {
                        gx[i % w] += gv;
                    }
                }
            }
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], x: Var, f: impl Fn(usize) -> f64) {
        if !self.needs(x) {
            return;
        }
        let n = self.value(x).len();
        let gx = slot(grads, x, n);
        for (i, v) in gx.iter_mut().enumerate() {
            *v += f(i);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn permute_0213_data(x: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
