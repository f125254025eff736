//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its forward value and the inputs needed
//! by its backward rule. Node indices only ever point backwards, so the tape
//! is always in topological order and [`Tape::backward`] is a single reverse
//! sweep.

mod gradcheck;
pub(crate) mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
use kernels::{col2im, gemm, im2col, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies an op for reporting and for negative-control fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar,
    MatMul,
    Transpose,
    AddRowBias,
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Sum,
    Mean,
    Reshape,
    RowNorms,
    SoftmaxRows,
    Conv2d,
    ConvTranspose2d,
    GraphAggregate,
    BceWithLogits,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddScalar,
        OpKind::MulScalar,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::AddRowBias,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Log,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::RowNorms,
        OpKind::SoftmaxRows,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::GraphAggregate,
        OpKind::BceWithLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::RowNorms => "row_norms",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::GraphAggregate => "graph_aggregate",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvSpec { stride, pad }
    }
}

/// Per-row neighbour lists shared by every block of a graph aggregation.
pub type NeighborLists = Arc<Vec<Vec<usize>>>;

#[derive(Debug)]
enum Op {
    Leaf,
    Elementwise(Elementwise, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Activation(Activation, Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    RowNorms(Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    GraphAggregate(Var, NeighborLists),
    BceWithLogits(Var, Arc<Tensor>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Elementwise(Elementwise::Add, ..) => OpKind::Add,
            Op::Elementwise(Elementwise::Sub, ..) => OpKind::Sub,
            Op::Elementwise(Elementwise::Mul, ..) => OpKind::Mul,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Activation(Activation::Sigmoid, _) => OpKind::Sigmoid,
            Op::Activation(Activation::Tanh, _) => OpKind::Tanh,
            Op::Activation(Activation::Relu, _) => OpKind::Relu,
            Op::Log(_) => OpKind::Log,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::RowNorms(_) => OpKind::RowNorms,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::GraphAggregate(..) => OpKind::GraphAggregate,
            Op::BceWithLogits(..) => OpKind::BceWithLogits,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a dynamic computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, or `None` if `v` is not tracked or
    /// does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_conv_ranks(op: &'static str, x: &Tensor, w: &Tensor) -> Result<(usize, [usize; 3])> {
    let (batch, chw) = match *x.shape() {
        [c, h, w] => (1, [c, h, w]),
        [b, c, h, w] => (b, [c, h, w]),
        _ => return Err(Error::shape(op, x.shape(), w.shape())),
    };
    if w.ndim() != 4 {
        return Err(Error::shape(op, x.shape(), w.shape()));
    }
    Ok((batch, chw))
}

fn with_batch_shape(x: &Tensor, c: usize, h: usize, w: usize) -> Vec<usize> {
    if x.ndim() == 3 {
        vec![c, h, w]
    } else {
        vec![x.shape()[0], c, h, w]
    }
}

/// Output side length of a convolution, rejecting geometries that do not
/// tile the padded input exactly.
pub fn conv_out_len(len: usize, k: usize, spec: ConvSpec) -> Result<usize> {
    let padded = len + 2 * spec.pad;
    if spec.stride == 0 || k == 0 || padded < k || (padded - k) % spec.stride != 0 {
        return Err(Error::Geometry {
            op: "conv2d",
            detail: format!(
                "input {len}, kernel {k}, stride {}, pad {} does not give an integer output size",
                spec.stride, spec.pad
            ),
        });
    }
    Ok((padded - k) / spec.stride + 1)
}

/// Output side length of a transposed convolution.
pub fn conv_transpose_out_len(len: usize, k: usize, spec: ConvSpec) -> Result<usize> {
    let full = (len - 1) * spec.stride + k;
    if spec.stride == 0 || k == 0 || full <= 2 * spec.pad {
        return Err(Error::Geometry {
            op: "conv_transpose2d",
            detail: format!(
                "input {len}, kernel {k}, stride {}, pad {} gives an empty output",
                spec.stride, spec.pad
            ),
        });
    }
    Ok(full - 2 * spec.pad)
}

fn conv_geom(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<(usize, ConvGeom, usize)> {
    let (batch, [c, h, wd]) = check_conv_ranks("conv2d", x, w)?;
    let [o, wc, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    if wc != c {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    let g = ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kh,
        kw,
        stride: spec.stride,
        pad: spec.pad,
        out_h: conv_out_len(h, kh, spec)?,
        out_w: conv_out_len(wd, kw, spec)?,
    };
    Ok((batch, g, o))
}

/// Geometry of the forward convolution whose input adjoint is this transposed
/// convolution: `channels/height/width` describe the transposed output.
fn conv_transpose_geom(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<(usize, ConvGeom, usize)> {
    let (batch, [c, h, wd]) = check_conv_ranks("conv_transpose2d", x, w)?;
    let [wc, o, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    if wc != c {
        return Err(Error::shape("conv_transpose2d", x.shape(), w.shape()));
    }
    let g = ConvGeom {
        channels: o,
        height: conv_transpose_out_len(h, kh, spec)?,
        width: conv_transpose_out_len(wd, kw, spec)?,
        kh,
        kw,
        stride: spec.stride,
        pad: spec.pad,
        out_h: h,
        out_w: wd,
    };
    Ok((batch, g, c))
}

fn check_bias(op: &'static str, b: Option<&Tensor>, channels: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [channels] => Err(Error::shape(op, b.shape(), &[channels])),
        _ => Ok(()),
    }
}

/// Cross-correlation (no kernel flip) of `x` (`C×H×W` or `B×C×H×W`) with
/// `w` (`O×C×KH×KW`), plus optional per-channel bias.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let (batch, g, o) = conv_geom(x, w, spec)?;
    check_bias("conv2d", b, o)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * o * ncol];
    let mut cols = vec![0.0; rows * ncol];
    for bi in 0..batch {
        im2col(&g, &x.data()[bi * in_len..(bi + 1) * in_len], &mut cols);
        let dst = &mut out[bi * o * ncol..(bi + 1) * o * ncol];
        gemm(o, rows, ncol, w.data(), false, &cols, false, dst, false);
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(ncol).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b.data()[oc]);
            }
        }
    }
    Tensor::new(with_batch_shape(x, o, g.out_h, g.out_w), out)
}

/// Transposed convolution of `x` (`C×H×W` or `B×C×H×W`) with `w`
/// (`C×O×KH×KW`); the exact adjoint of [`conv2d_forward`] with the same kernel.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let (batch, g, c) = conv_transpose_geom(x, w, spec)?;
    check_bias("conv_transpose2d", b, g.channels)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let out_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * out_len];
    let mut cols = vec![0.0; rows * ncol];
    for bi in 0..batch {
        let xb = &x.data()[bi * c * ncol..(bi + 1) * c * ncol];
        gemm(rows, c, ncol, w.data(), true, xb, false, &mut cols, false);
        let dst = &mut out[bi * out_len..(bi + 1) * out_len];
        col2im(&g, &cols, dst);
        if let Some(b) = b {
            let plane = g.height * g.width;
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b.data()[oc]);
            }
        }
    }
    Tensor::new(with_batch_shape(x, g.channels, g.height, g.width), out)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scales every gradient produced by ops of `kind` by 1.5,
    /// so gradient checks covering that op must fail.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant (untracked) input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records an input whose gradient is wanted.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant copy of `v`, cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Element-wise `a op b`; `b` may be a one-element tensor broadcast over `a`.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = tb.is_scalar() && !ta.is_scalar();
        if ta.shape() != tb.shape() && !broadcast {
            let op = match kind {
                Elementwise::Add => "add",
                Elementwise::Sub => "sub",
                Elementwise::Mul => "mul",
            };
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
        };
        let data = if broadcast {
            let s = tb.item();
            ta.data().iter().map(|&x| f(x, s)).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Elementwise(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.tracked(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.tracked(&[a]);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    /// `1 - a`, element-wise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.mul_scalar(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        };
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let out = Tensor::new([m, n], out)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let &[m, n] = ta.shape() else {
            return Err(Error::invalid(format!(
                "transpose needs a matrix, got {:?}",
                ta.shape()
            )));
        };
        let out = Tensor::new([n, m], transpose_data(ta.data(), m, n))?;
        let rg = self.tracked(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Adds the vector `b` (length n) to every row of the m×n matrix `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let &[_, n] = tx.shape() else {
            return Err(Error::shape("add_row_bias", tx.shape(), tb.shape()));
        };
        if tb.shape() != [n] {
            return Err(Error::shape("add_row_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(v, bv)| *v += bv);
        }
        let rg = self.tracked(&[x, b]);
        Ok(self.push(out, Op::AddRowBias(x, b), rg))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let tx = self.value(x);
        let out = match kind {
            Activation::Sigmoid => tx.map(sigmoid),
            Activation::Tanh => tx.map(f64::tanh),
            Activation::Relu => tx.map(|v| if v < 0.0 { 0.0 } else { v }),
        };
        let rg = self.tracked(&[x]);
        self.push(out, Op::Activation(kind, x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    /// Natural log; rejects non-positive entries.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if let Some(bad) = tx.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::invalid(format!("log of non-positive value {bad}")));
        }
        let out = tx.map(f64::ln);
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::Log(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.tracked(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::scalar(tx.sum() / tx.numel() as f64);
        let rg = self.tracked(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Euclidean norm of each row of an m×n matrix, giving a length-m vector.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[m, n] = tx.shape() else {
            return Err(Error::invalid(format!(
                "row_norms needs a matrix, got {:?}",
                tx.shape()
            )));
        };
        let norms = tx
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new([m], norms)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::RowNorms(x), rg))
    }

    /// Softmax of each row of an m×n matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[_, n] = tx.shape() else {
            return Err(Error::invalid(format!(
                "softmax_rows needs a matrix, got {:?}",
                tx.shape()
            )));
        };
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let rg = self.tracked(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, rg))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let out = conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let rg = self.tracked(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, spec }, rg))
    }

    /// Row `k·n + i` of the output is the sum of rows `k·n + j` of `x` over
    /// `j ∈ neighbors[i]`, where `n = neighbors.len()`. The rows of `x` hold
    /// a batch of graphs, `n` node rows each.
    pub fn graph_aggregate(&mut self, x: Var, neighbors: NeighborLists) -> Result<Var> {
        let tx = self.value(x);
        let n = neighbors.len();
        let &[rows, d] = tx.shape() else {
            return Err(Error::invalid(format!(
                "graph_aggregate needs a matrix, got {:?}",
                tx.shape()
            )));
        };
        if n == 0 || rows % n != 0 || neighbors.iter().flatten().any(|&j| j >= n) {
            return Err(Error::invalid(format!(
                "graph_aggregate: {rows} rows do not form blocks of {n} nodes"
            )));
        }
        let mut out = vec![0.0; rows * d];
        for block in 0..rows / n {
            for (i, nbrs) in neighbors.iter().enumerate() {
                let dst = &mut out[(block * n + i) * d..][..d];
                for &j in nbrs {
                    let src = &tx.data()[(block * n + j) * d..][..d];
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
                }
            }
        }
        let out = Tensor::new([rows, d], out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::GraphAggregate(x, neighbors), rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let tz = self.value(logits);
        if tz.shape() != targets.shape() {
            return Err(Error::shape("bce_with_logits", tz.shape(), targets.shape()));
        }
        let total: f64 = tz
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| (if z < 0.0 { 0.0 } else { z }) - t * z + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / tz.numel() as f64);
        let rg = self.tracked(&[logits]);
        Ok(self.push(out, Op::BceWithLogits(logits, Arc::new(targets.clone())), rg))
    }

    /// Reverse sweep from a scalar `root`. Gradients are fresh on every call;
    /// callers accumulate across passes themselves.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_backward(node, &g)?;
            let scale = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
            for (v, mut dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if scale != 1.0 {
                    dg.data_mut().iter_mut().for_each(|x| *x *= scale);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dg)?,
                    slot => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::Elementwise(kind, a, b) => {
                let (ta, tb) = (val(a), val(b));
                let broadcast = tb.is_scalar() && !ta.is_scalar();
                let ga = match kind {
                    Elementwise::Add | Elementwise::Sub => g.clone(),
                    Elementwise::Mul if broadcast => g.map(|x| x * tb.item()),
                    Elementwise::Mul => zip_map(g, tb, |x, y| x * y),
                };
                let gb_full = match kind {
                    Elementwise::Add => g.clone(),
                    Elementwise::Sub => g.map(|x| -x),
                    Elementwise::Mul => zip_map(g, ta, |x, y| x * y),
                };
                let gb = if broadcast {
                    Tensor::new(tb.shape().to_vec(), vec![gb_full.sum()])?
                } else {
                    gb_full
                };
                out.push((a, ga));
                out.push((b, gb));
            }
            &Op::AddScalar(a) => out.push((a, g.clone())),
            &Op::MulScalar(a, s) => out.push((a, g.map(|x| x * s))),
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    out.push((a, Tensor::new([m, k], ga)?));
                }
                if wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    out.push((b, Tensor::new([k, n], gb)?));
                }
            }
            &Op::Transpose(a) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                out.push((a, Tensor::new([m, n], transpose_data(g.data(), n, m))?));
            }
            &Op::AddRowBias(x, b) => {
                let n = val(b).numel();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                out.push((x, g.clone()));
                out.push((b, Tensor::new([n], gb)?));
            }
            &Op::Activation(kind, x) => {
                let y = &node.value;
                let gx = match kind {
                    Activation::Sigmoid => zip_map(g, y, |g, y| g * y * (1.0 - y)),
                    Activation::Tanh => zip_map(g, y, |g, y| g * (1.0 - y * y)),
                    Activation::Relu => zip_map(g, val(x), |g, x| if x > 0.0 { g } else { 0.0 }),
                };
                out.push((x, gx));
            }
            &Op::Log(x) => out.push((x, zip_map(g, val(x), |g, x| g / x))),
            &Op::Sum(x) => out.push((x, Tensor::full(val(x).shape().to_vec(), g.item()))),
            &Op::Mean(x) => {
                let tx = val(x);
                out.push((x, Tensor::full(tx.shape().to_vec(), g.item() / tx.numel() as f64)));
            }
            &Op::Reshape(x) => out.push((x, g.clone().reshape(val(x).shape().to_vec())?)),
            &Op::RowNorms(x) => {
                let tx = val(x);
                let n = tx.shape()[1];
                let mut gx = vec![0.0; tx.numel()];
                for (r, (row, dst)) in tx.data().chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                    let norm = node.value.data()[r];
                    if norm > 0.0 {
                        let s = g.data()[r] / norm;
                        dst.iter_mut().zip(row).for_each(|(d, v)| *d = s * v);
                    }
                }
                out.push((x, Tensor::new(tx.shape().to_vec(), gx)?));
            }
            &Op::SoftmaxRows(x) => {
                let p = &node.value;
                let n = p.shape()[1];
                let mut gx = vec![0.0; p.numel()];
                for ((pr, gr), dst) in p.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &pi), &gi) in dst.iter_mut().zip(pr).zip(gr) {
                        *d = pi * (gi - dot);
                    }
                }
                out.push((x, Tensor::new(p.shape().to_vec(), gx)?));
            }
            &Op::Conv2d { x, w, b, spec } => {
                let (tx, tw) = (val(x), val(w));
                let (batch, geom, o) = conv_geom(tx, tw, spec)?;
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                let mut gx = vec![0.0; tx.numel()];
                let mut gw = vec![0.0; tw.numel()];
                let mut cols = vec![0.0; rows * ncol];
                for bi in 0..batch {
                    let gb = &g.data()[bi * o * ncol..(bi + 1) * o * ncol];
                    if wants(w) {
                        im2col(&geom, &tx.data()[bi * in_len..(bi + 1) * in_len], &mut cols);
                        gemm(o, ncol, rows, gb, false, &cols, true, &mut gw, true);
                    }
                    if wants(x) {
                        gemm(rows, o, ncol, tw.data(), true, gb, false, &mut cols, false);
                        col2im(&geom, &cols, &mut gx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                out.push((x, Tensor::new(tx.shape().to_vec(), gx)?));
                out.push((w, Tensor::new(tw.shape().to_vec(), gw)?));
                if let Some(b) = b {
                    out.push((b, channel_sums(g, batch, o, ncol)?));
                }
            }
            &Op::ConvTranspose2d { x, w, b, spec } => {
                let (tx, tw) = (val(x), val(w));
                let (batch, geom, c) = conv_transpose_geom(tx, tw, spec)?;
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let out_len = geom.channels * geom.height * geom.width;
                let mut gx = vec![0.0; tx.numel()];
                let mut gw = vec![0.0; tw.numel()];
                let mut cols = vec![0.0; rows * ncol];
                for bi in 0..batch {
                    im2col(&geom, &g.data()[bi * out_len..(bi + 1) * out_len], &mut cols);
                    let xb = &tx.data()[bi * c * ncol..(bi + 1) * c * ncol];
                    if wants(x) {
                        let dst = &mut gx[bi * c * ncol..(bi + 1) * c * ncol];
                        gemm(c, rows, ncol, tw.data(), false, &cols, false, dst, false);
                    }
                    if wants(w) {
                        gemm(c, ncol, rows, xb, false, &cols, true, &mut gw, true);
                    }
                }
                out.push((x, Tensor::new(tx.shape().to_vec(), gx)?));
                out.push((w, Tensor::new(tw.shape().to_vec(), gw)?));
                if let Some(b) = b {
                    let plane = geom.height * geom.width;
                    out.push((b, channel_sums(g, batch, geom.channels, plane)?));
                }
            }
            Op::GraphAggregate(x, neighbors) => {
                let n = neighbors.len();
                let d = g.shape()[1];
                let rows = g.shape()[0];
                let mut gx = vec![0.0; rows * d];
                for block in 0..rows / n {
                    for (i, nbrs) in neighbors.iter().enumerate() {
                        let src = &g.data()[(block * n + i) * d..][..d];
                        for &j in nbrs {
                            let dst = &mut gx[(block * n + j) * d..][..d];
                            dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
                        }
                    }
                }
                out.push((*x, Tensor::new([rows, d], gx)?));
            }
            Op::BceWithLogits(z, targets) => {
                let tz = val(*z);
                let scale = g.item() / tz.numel() as f64;
                out.push((*z, zip_map(tz, targets, |z, t| scale * (sigmoid(z) - t))));
            }
        }
        Ok(out)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map keeps the shape")
}

fn transpose_data(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

fn channel_sums(g: &Tensor, batch: usize, channels: usize, plane: usize) -> Result<Tensor> {
    let mut sums = vec![0.0; channels];
    for bi in 0..batch {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += g.data()[(bi * channels + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    Tensor::new([channels], sums)
}

#[cfg(test)]
mod tests;
