//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the tape index order is already a
//! topological order and [`Graph::gradients`] walks it backwards.
//!
//! Parameters enter the tape through [`Graph::param`]. Each storage slot of a
//! [`ParameterStore`] maps to exactly one leaf per graph, however many times
//! it is read, so gradients of weight-shared layers sum over all use sites.
//!
//! Broadcasting is limited to the second operand of a binary op being a
//! single row repeated over every row of the first.

use std::collections::HashMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Swish,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Tags accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Swish,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
}

impl ElementwiseOp {
    pub fn parse(tag: &str, scale: f64) -> Option<Self> {
        Some(match tag {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "scale" => Self::Scale(scale),
            "swish" => Self::Swish,
            "sigmoid" => Self::Sigmoid,
            "tanh" => Self::Tanh,
            "relu" => Self::Relu,
            "exp" => Self::Exp,
            "log" => Self::Log,
            _ => return None,
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
    LogAddExp(Var, Var),
    DepthwiseConv1d {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Im2Col {
        x: Var,
        width: usize,
        kernel: usize,
        stride: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Leaf gradients produced by [`Graph::gradients`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn row_broadcast(a: &Tensor, b: &Tensor) -> Option<bool> {
    if a.rows() == b.rows() && a.cols() == b.cols() {
        Some(false)
    } else if b.rows() == 1 && a.cols() == b.cols() {
        Some(true)
    } else {
        None
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Graph {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            dropout_rng: None,
        }
    }

    /// A graph in training mode whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A non-parameter leaf (input features, constants).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Leaf for the storage slot behind `name`; repeated reads return the
    /// same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let key = store.resolve(name)?;
        if let Some(&v) = self.params.get(key) {
            return Ok(v);
        }
        let v = self.push(Op::Leaf, store.value(key)?.clone());
        self.params.insert(key.to_string(), v);
        self.param_order.push((key.to_string(), v));
        Ok(v)
    }

    /// Parameters read by this graph, in first-use order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::shape(
                "matmul",
                format!("{m}x{k} · {}x{n}", bv.rows()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bcast = row_broadcast(av, bv).ok_or_else(|| {
            Error::shape(
                "elementwise",
                format!("{:?} with {:?}", av.shape(), bv.shape()),
            )
        })?;
        let n = bv.cols();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if bcast { bv.data()[i % n] } else { bv.data()[i] };
                f(x, y)
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Binary(kind, a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), value)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Swish => |v| v * sigmoid(v),
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| v.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
        };
        let value = self.value(x).map(f);
        self.push(Op::Unary(kind, x), value)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(Unary::Swish, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// Dispatch by tag; binary tags take two inputs, the rest one.
    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                "elementwise",
                format!("{op:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        Ok(match op {
            ElementwiseOp::Add => self.add(inputs[0], inputs[1])?,
            ElementwiseOp::Sub => self.sub(inputs[0], inputs[1])?,
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1])?,
            ElementwiseOp::Scale(s) => self.scale(inputs[0], s),
            ElementwiseOp::Swish => self.unary(Unary::Swish, inputs[0]),
            ElementwiseOp::Sigmoid => self.unary(Unary::Sigmoid, inputs[0]),
            ElementwiseOp::Tanh => self.unary(Unary::Tanh, inputs[0]),
            ElementwiseOp::Relu => self.unary(Unary::Relu, inputs[0]),
            ElementwiseOp::Exp => self.unary(Unary::Exp, inputs[0]),
            ElementwiseOp::Log => self.unary(Unary::Log, inputs[0]),
        })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(Op::SoftmaxRows(x), value)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(Op::LogSoftmaxRows(x), value)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (t, d) = (xv.rows(), xv.cols());
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("width {d}, gain {}, bias {}", gv.len(), bv.len()),
            ));
        }
        let mut xhat = vec![0.0; t * d];
        let mut out = vec![0.0; t * d];
        let mut inv_std = Vec::with_capacity(t);
        for r in 0..t {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let xhat = Tensor::new(xv.shape().to_vec(), xhat)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(Op::Transpose(x), value)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).clone().reshaped(vec![rows, cols])?;
        Ok(self.push(Op::Reshape(x), value))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(r, len, data)?;
        Ok(self.push(Op::SliceCols { x, start }, value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `1 × n` row picking flat entries of `x`; `None` yields `fill`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, fill: f64) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of {}", xv.len()),
            ));
        }
        let data = index
            .iter()
            .map(|i| i.map_or(fill, |i| xv.data()[i]))
            .collect::<Vec<_>>();
        let value = Tensor::matrix(1, data.len(), data)?;
        Ok(self.push(Op::Gather { x, index }, value))
    }

    /// Elementwise `log(exp(a) + exp(b))`, exact when either side is `-inf`.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "log_add_exp",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| log_add_exp(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::LogAddExp(a, b), value))
    }

    /// Per-channel 1-D convolution over rows with same padding.
    ///
    /// `x: T×C`, `weight: K×C` with odd `K`, `bias: C`.
    pub fn depthwise_conv1d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let (t, c, k) = (xv.rows(), xv.cols(), wv.rows());
        if wv.cols() != c || bv.len() != c || k % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("x {t}x{c}, weight {:?}, bias {:?}", wv.shape(), bv.shape()),
            ));
        }
        let pad = k / 2;
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let orow = &mut out[ti * c..(ti + 1) * c];
            orow.copy_from_slice(bv.data());
            for ki in 0..k {
                let src = ti + ki;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xrow = xv.row(src - pad);
                let wrow = wv.row(ki);
                for j in 0..c {
                    orow[j] += wrow[j] * xrow[j];
                }
            }
        }
        let value = Tensor::matrix(t, c, out)?;
        Ok(self.push(Op::DepthwiseConv1d { x, weight, bias }, value))
    }

    /// Patch extraction for a strided 2-D convolution without padding.
    ///
    /// `x` is a `(height·width) × channels` feature map in row-major
    /// `(h, w)` order. The result has one row per output position `(ho, wo)`
    /// and `kernel²·channels` columns ordered `(kh, kw, channel)`.
    pub fn im2col(
        &mut self,
        x: Var,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let ch = xv.cols();
        if xv.rows() != height * width || height < kernel || width < kernel || stride == 0 {
            return Err(Error::shape(
                "im2col",
                format!(
                    "{}x{ch} map as {height}x{width}, kernel {kernel}",
                    xv.rows()
                ),
            ));
        }
        let ho = (height - kernel) / stride + 1;
        let wo = (width - kernel) / stride + 1;
        let cols = kernel * kernel * ch;
        let mut out = vec![0.0; ho * wo * cols];
        for i in 0..ho {
            for j in 0..wo {
                let orow = &mut out[(i * wo + j) * cols..(i * wo + j + 1) * cols];
                for kh in 0..kernel {
                    for kw in 0..kernel {
                        let src = (i * stride + kh) * width + j * stride + kw;
                        let dst = (kh * kernel + kw) * ch;
                        orow[dst..dst + ch].copy_from_slice(xv.row(src));
                    }
                }
            }
        }
        let value = Tensor::matrix(ho * wo, cols, out)?;
        Ok(self.push(
            Op::Im2Col {
                x,
                width,
                kernel,
                stride,
            },
            value,
        ))
    }

    /// Inverted dropout: identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - p;
        let xv = &self.nodes[x.0].value;
        let mask = (0..xv.len())
            .map(|_| {
                if rng.random_bool(keep) {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::new(xv.shape().to_vec(), mask)?;
        let m = self.leaf(mask);
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulate `∂loss/∂param` into the store's gradient slots.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, v) in &self.param_order {
            if let Some(g) = grads.get(*v) {
                store.get_mut(name)?.grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.accumulate(grads, *a, |ga| gemm_nt(g.data(), bv.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(av.data(), g.data(), gb, m, k, n));
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.cols();
                let bcast = bv.len() != av.len();
                let bat = |idx: usize| if bcast { bv.data()[idx % n] } else { bv.data()[idx] };
                match kind {
                    Binary::Add | Binary::Sub => {
                        let sign = if *kind == Binary::Add { 1.0 } else { -1.0 };
                        self.accumulate(grads, *a, |ga| {
                            ga.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y)
                        });
                        self.accumulate(grads, *b, |gb| {
                            for (idx, y) in g.data().iter().enumerate() {
                                gb[if bcast { idx % n } else { idx }] += sign * y;
                            }
                        });
                    }
                    Binary::Mul => {
                        self.accumulate(grads, *a, |ga| {
                            for (idx, y) in g.data().iter().enumerate() {
                                ga[idx] += y * bat(idx);
                            }
                        });
                        self.accumulate(grads, *b, |gb| {
                            for (idx, y) in g.data().iter().enumerate() {
                                gb[if bcast { idx % n } else { idx }] += y * av.data()[idx];
                            }
                        });
                    }
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(g.data()).for_each(|(a, y)| *a += s * y)
                });
            }
            Op::Unary(kind, x) => {
                let (xv, yv) = (self.value(*x), &node.value);
                self.accumulate(grads, *x, |gx| {
                    for idx in 0..gx.len() {
                        let (xi, yi) = (xv.data()[idx], yv.data()[idx]);
                        let d = match kind {
                            Unary::Swish => {
                                let s = sigmoid(xi);
                                s + xi * s * (1.0 - s)
                            }
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Tanh => 1.0 - yi * yi,
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => yi,
                            Unary::Log => 1.0 / xi,
                        };
                        gx[idx] += g.data()[idx] * d;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = xhat.cols();
                self.accumulate(grads, *gain, |gg| {
                    for (idx, y) in g.data().iter().enumerate() {
                        gg[idx % d] += y * xhat.data()[idx];
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (idx, y) in g.data().iter().enumerate() {
                        gb[idx % d] += y;
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut gh = vec![0.0; d];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let (hr, gr) = (xhat.row(r), g.row(r));
                        for j in 0..d {
                            gh[j] = gr[j] * gv.data()[j];
                        }
                        let mean_g = gh.iter().sum::<f64>() / d as f64;
                        let mean_gh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv * (gh[j] - mean_g - hr[j] * mean_gh);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(gt.data()).for_each(|(a, y)| *a += y)
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(g.data()).for_each(|(a, y)| *a += y)
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = g.cols();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        for (j, y) in g.row(r).iter().enumerate() {
                            gx[r * c + start + j] += y;
                        }
                    }
                });
                debug_assert!(start + len <= c);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for j in 0..pc {
                                gp[r * pc + j] += g.data()[r * total + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::Sum(x) => {
                let y = g.data()[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += y));
            }
            Op::Gather { x, index } => {
                self.accumulate(grads, *x, |gx| {
                    for (j, i) in index.iter().enumerate() {
                        if let Some(i) = i {
                            gx[*i] += g.data()[j];
                        }
                    }
                });
            }
            Op::LogAddExp(a, b) => {
                let out = &node.value;
                for side in [*a, *b] {
                    let sv = self.value(side);
                    self.accumulate(grads, side, |gs| {
                        for idx in 0..gs.len() {
                            let o = out.data()[idx];
                            if o == f64::NEG_INFINITY {
                                continue;
                            }
                            gs[idx] += g.data()[idx] * (sv.data()[idx] - o).exp();
                        }
                    });
                }
            }
            Op::DepthwiseConv1d { x, weight, bias } => {
                let (xv, wv) = (self.value(*x), self.value(*weight));
                let (t, c, k) = (xv.rows(), xv.cols(), wv.rows());
                let pad = k / 2;
                self.accumulate(grads, *bias, |gb| {
                    for r in 0..t {
                        for (j, y) in g.row(r).iter().enumerate() {
                            gb[j] += y;
                        }
                    }
                });
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for ti in 0..t {
                        for ki in 0..k {
                            let src = ti + ki;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            f(ti, ki, src - pad);
                        }
                    }
                };
                self.accumulate(grads, *weight, |gw| {
                    taps(&mut |ti, ki, s| {
                        for j in 0..c {
                            gw[ki * c + j] += g.data()[ti * c + j] * xv.data()[s * c + j];
                        }
                    })
                });
                self.accumulate(grads, *x, |gx| {
                    taps(&mut |ti, ki, s| {
                        for j in 0..c {
                            gx[s * c + j] += g.data()[ti * c + j] * wv.data()[ki * c + j];
                        }
                    })
                });
            }
            Op::Im2Col {
                x,
                width,
                kernel,
                stride,
            } => {
                let ch = self.value(*x).cols();
                let cols = g.cols();
                let wo = (width - kernel) / stride + 1;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        let (i, j) = (r / wo, r % wo);
                        let grow = &g.data()[r * cols..(r + 1) * cols];
                        for kh in 0..*kernel {
                            for kw in 0..*kernel {
                                let src = (i * stride + kh) * width + j * stride + kw;
                                let off = (kh * kernel + kw) * ch;
                                for cc in 0..ch {
                                    gx[src * ch + cc] += grow[off + cc];
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(slot.data_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Central differences of `f` at `x`, compared entrywise with the
    /// reverse-mode gradient of the same scalar function.
    fn check_gradient(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Var, tol: f64) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let out = f(&mut g, v);
        let grads = g.gradients(out).unwrap();
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let h = 1e-5;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let v = g.leaf(xp);
                let out = f(&mut g, v);
                g.value(out).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < tol, "entry {i}: analytic {a} numeric {numeric} rel {rel}");
        }
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut g = Graph::new();
        let x = random(2, 3, 1);
        let i2 = g.leaf(Tensor::identity(2));
        let xv = g.leaf(x.clone());
        let y = g.matmul(i2, xv).unwrap();
        assert_eq!(g.value(y), &x);

        let a = g.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = g.leaf(Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = random(3, 3, 2);
        check_gradient(
            &random(3, 3, 3),
            |g, a| {
                let bv = g.leaf(b.clone());
                let y = g.matmul(a, bv).unwrap();
                g.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn swish_values_and_gradient() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(0.0));
        let s = g.swish(z);
        assert_eq!(g.value(s).data()[0], 0.0);
        check_gradient(&Tensor::scalar(1.0), |g, x| g.swish(x), 1e-6);
    }

    #[test]
    fn add_zero_is_identity_and_broadcast_rules() {
        let mut g = Graph::new();
        let x = random(3, 4, 4);
        let xv = g.leaf(x.clone());
        let zero = g.leaf(Tensor::zeros(&[4]));
        let y = g.add(xv, zero).unwrap();
        assert_eq!(g.value(y).data(), x.data());
        let bad = g.leaf(Tensor::zeros(&[3]));
        assert!(g.add(xv, bad).is_err());
        let col = g.leaf(Tensor::zeros(&[3, 1]));
        assert!(g.add(xv, col).is_err());
    }

    #[test]
    fn elementwise_gradients() {
        let x = random(2, 3, 5);
        let other = random(2, 3, 6);
        let row = random(1, 3, 7);
        for op in [
            ElementwiseOp::Swish,
            ElementwiseOp::Sigmoid,
            ElementwiseOp::Tanh,
            ElementwiseOp::Exp,
            ElementwiseOp::Scale(-2.5),
        ] {
            check_gradient(
                &x,
                |g, v| {
                    let y = g.elementwise(op, &[v]).unwrap();
                    let w = g.leaf(other.clone());
                    let p = g.mul(y, w).unwrap();
                    g.sum(p)
                },
                1e-6,
            );
        }
        check_gradient(
            &x.map(|v| v.abs() + 0.5),
            |g, v| {
                let y = g.elementwise(ElementwiseOp::Log, &[v]).unwrap();
                g.sum(y)
            },
            1e-6,
        );
        check_gradient(
            &x.map(|v| if v.abs() < 0.1 { 0.3 } else { v }),
            |g, v| {
                let y = g.relu(v);
                let w = g.leaf(other.clone());
                let p = g.mul(y, w).unwrap();
                g.sum(p)
            },
            1e-6,
        );
        for op in [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul] {
            // Broadcast operand is the differentiated one.
            check_gradient(
                &row,
                |g, r| {
                    let xv = g.leaf(x.clone());
                    let y = g.elementwise(op, &[xv, r]).unwrap();
                    let w = g.leaf(other.clone());
                    let p = g.mul(y, w).unwrap();
                    g.sum(p)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn softmax_rows_properties() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap());
        let s = g.softmax_rows(x);
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.leaf(Tensor::from_rows(&[&[1000.0, 0.0]]).unwrap());
        let s = g.softmax_rows(x);
        assert!(g.value(s).all_finite());
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);

        let w = random(2, 4, 9);
        check_gradient(
            &random(2, 4, 8),
            |g, v| {
                let s = g.softmax_rows(v);
                let wv = g.leaf(w.clone());
                let p = g.mul(s, wv).unwrap();
                g.sum(p)
            },
            1e-6,
        );
        check_gradient(
            &random(2, 4, 10),
            |g, v| {
                let s = g.log_softmax_rows(v);
                let wv = g.leaf(w.clone());
                let p = g.mul(s, wv).unwrap();
                g.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn layer_norm_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 5], 3.0));
        let gain = g.leaf(Tensor::full(&[5], 1.0));
        let bias = g.leaf(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.leaf(random(3, 5, 11));
        let bias_v = random(1, 5, 12).reshaped(vec![5]).unwrap();
        let bias = g.leaf(bias_v.clone());
        let y = g.layer_norm(x, gain, bias).unwrap();
        let yv = g.value(y);
        for r in 0..3 {
            let mean: f64 = yv.row(r).iter().sum::<f64>() / 5.0;
            assert!((mean - bias_v.sum() / 5.0).abs() < 1e-12);
        }

        let gain_v = random(1, 5, 13);
        let w = random(3, 5, 14);
        let check = |which: usize| {
            let x0 = random(3, 5, 15);
            let base = [x0.clone(), gain_v.clone(), bias_v.clone().reshaped(vec![1, 5]).unwrap()];
            check_gradient(
                &base[which],
                |g, v| {
                    let mut ins = base.clone().map(|t| g.leaf(t));
                    ins[which] = v;
                    let y = g.layer_norm(ins[0], ins[1], ins[2]).unwrap();
                    let wv = g.leaf(w.clone());
                    let p = g.mul(y, wv).unwrap();
                    g.sum(p)
                },
                1e-5,
            );
        };
        (0..3).for_each(check);
    }

    #[test]
    fn structural_ops_gradients() {
        let w = random(4, 3, 20);
        check_gradient(
            &random(3, 4, 21),
            |g, v| {
                let t = g.transpose(v);
                let a = g.slice_cols(t, 1, 2).unwrap();
                let b = g.slice_cols(t, 0, 1).unwrap();
                let c = g.concat_cols(&[a, b]).unwrap();
                let wv = g.leaf(w.clone());
                let p = g.mul(c, wv).unwrap();
                let r = g.reshape(p, 2, 6).unwrap();
                let e = g.unary(Unary::Tanh, r);
                g.sum(e)
            },
            1e-6,
        );
    }

    #[test]
    fn gather_and_log_add_exp_gradients() {
        let x = random(2, 3, 30);
        check_gradient(
            &x,
            |g, v| {
                let a = g.gather(v, vec![Some(0), Some(4), None], f64::NEG_INFINITY).unwrap();
                let b = g.gather(v, vec![Some(1), None, None], f64::NEG_INFINITY).unwrap();
                let c = g.log_add_exp(a, b).unwrap();
                let d = g.gather(c, vec![Some(0), Some(1)], 0.0).unwrap();
                let e = g.unary(Unary::Exp, d);
                g.sum(e)
            },
            1e-6,
        );
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[1, 2], f64::NEG_INFINITY));
        let b = g.leaf(Tensor::from_rows(&[&[f64::NEG_INFINITY, 0.5]]).unwrap());
        let c = g.log_add_exp(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[f64::NEG_INFINITY, 0.5]);
    }

    #[test]
    fn conv_ops_gradients() {
        let (t, c, k) = (5, 3, 3);
        let x = random(t, c, 40);
        let w = random(k, c, 41);
        let b = random(1, c, 42);
        let mix = random(t, c, 43);
        for which in 0..3 {
            let base = [x.clone(), w.clone(), b.clone()];
            check_gradient(
                &base[which],
                |g, v| {
                    let mut ins = base.clone().map(|t| g.leaf(t));
                    ins[which] = v;
                    let y = g.depthwise_conv1d(ins[0], ins[1], ins[2]).unwrap();
                    let m = g.leaf(mix.clone());
                    let p = g.mul(y, m).unwrap();
                    g.sum(p)
                },
                1e-6,
            );
        }
        let fmap = random(7 * 6, 2, 44);
        let proj = random(18, 1, 45);
        check_gradient(
            &fmap,
            |g, v| {
                let cols = g.im2col(v, 7, 6, 3, 2).unwrap();
                let p = g.leaf(proj.clone());
                let y = g.matmul(cols, p).unwrap();
                let s = g.unary(Unary::Tanh, y);
                g.sum(s)
            },
            1e-6,
        );
    }

    #[test]
    fn im2col_shape() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[16 * 20, 1]));
        let y = g.im2col(x, 16, 20, 3, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[7 * 9, 9]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        let mut store = ParameterStore::new();
        assert!(g.backward(x, &mut store).is_err());
    }

    #[test]
    fn shared_param_accumulates_over_use_sites() {
        let mut store = ParameterStore::new();
        store.insert("p", random(1, 3, 50)).unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let s = g.sum(p);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[1.0, 1.0, 1.0]);

        store.zero_grad();
        let mut g = Graph::new();
        let p1 = g.param(&store, "p").unwrap();
        let p2 = g.param(&store, "p").unwrap();
        assert_eq!(p1, p2);
        let s = g.add(p1, p2).unwrap();
        let s = g.sum(s);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn two_backward_passes_double_the_gradient() {
        let mut store = ParameterStore::new();
        store.insert("w", random(3, 2, 60)).unwrap();
        let x = random(4, 3, 61);
        let run = |store: &mut ParameterStore| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let w = g.param(store, "w").unwrap();
            let y = g.matmul(xv, w).unwrap();
            let y = g.swish(y);
            let s = g.sum(y);
            g.backward(s, store).unwrap();
        };
        run(&mut store);
        let once = store.grad("w").unwrap().clone();
        run(&mut store);
        let twice = store.grad("w").unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() {
        let x = random(4, 4, 70);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let y = g.dropout(v, 0.5).unwrap();
        assert_eq!(g.value(y), &x);

        let run = |seed| {
            let mut g = Graph::training(seed);
            let v = g.leaf(x.clone());
            let y = g.dropout(v, 0.5).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(3), run(3));
        let y = run(3);
        assert!(y
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| *a == 0.0 || (a - 2.0 * b).abs() < 1e-15));
    }
}
