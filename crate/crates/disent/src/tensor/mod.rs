//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose inputs are tape-linked; calling
//! [`Tape::backward`] on a scalar root walks the recorded nodes in reverse
//! and accumulates gradients (summing at fan-in). Tensors that were never
//! watched are constants: they flow through forward ops but receive no
//! gradient.
//!
//! Storage and compute are f32 throughout; reductions accumulate in f64.
//! Every forward op checks its output for non-finite values and raises
//! instead of propagating them.

pub mod conv;
pub mod optim;
pub mod rng;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use conv::Conv2dDims;

#[derive(Clone)]
struct Value {
    dims: Vec<usize>,
    data: Arc<Vec<f32>>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Matmul,
    Conv2d { stride: usize, pad: usize },
    TransposeConv2d { stride: usize, pad: usize },
    Relu,
    LeakyRelu { slope: f32 },
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    Clamp { lo: f32, hi: f32 },
    Affine {
        a: f32,
        #[allow(dead_code)] // kept for op introspection; not needed by the grad
        b: f32,
    },
    Reshape,
    Narrow { axis: usize, start: usize },
    Concat { axis: usize },
    Broadcast,
    Sum,
    Mean,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Matmul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::TransposeConv2d { .. } => "transpose_conv2d",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::Affine { .. } => "affine",
            Op::Reshape => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Broadcast => "broadcast",
            Op::Sum => "sum",
            Op::Mean => "mean",
        }
    }
}

enum Src {
    Node(usize),
    Const(Value),
}

struct TapeNode {
    op: Op,
    srcs: Vec<Src>,
    value: Value,
}

/// Append-only record of forward operations. Cheap to clone (shared).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<TapeNode>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers a tensor as a differentiable leaf and returns the linked view.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let value = Value {
            dims: t.dims.clone(),
            data: Arc::clone(&t.data),
        };
        let id = {
            let mut nodes = self.inner.borrow_mut();
            nodes.push(TapeNode {
                op: Op::Leaf,
                srcs: Vec::new(),
                value: value.clone(),
            });
            nodes.len() - 1
        };
        Tensor {
            dims: t.dims.clone(),
            data: Arc::clone(&t.data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Reverse sweep from a scalar root. Gradients accumulate at fan-in.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let node = root.node.as_ref().ok_or(Error::RootNotOnTape)?;
        if !self.same(&node.tape) {
            return Err(Error::RootNotOnTape);
        }
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot(root.dims.clone()));
        }
        let nodes = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[node.id] = Some(vec![1.0]);
        for id in (0..=node.id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let n = &nodes[id];
            if matches!(n.op, Op::Leaf) {
                grads[id] = Some(gout);
                continue;
            }
            let src_values: Vec<&Value> = n
                .srcs
                .iter()
                .map(|s| match s {
                    Src::Node(i) => &nodes[*i].value,
                    Src::Const(v) => v,
                })
                .collect();
            let contributions = backward_op(&n.op, &gout, &n.value, &src_values);
            for (s, contrib) in n.srcs.iter().zip(contributions) {
                let (Src::Node(i), Some(c)) = (s, contrib) else {
                    continue;
                };
                match &mut grads[*i] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep; gradients are looked up via the tape-linked
/// tensor they belong to.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node.as_ref()?;
        let g = self.grads.get(node.id)?.as_ref()?;
        Some(Tensor::constant(t.dims.clone(), g.clone()))
    }

    pub fn get_data(&self, t: &Tensor) -> Option<&[f32]> {
        let node = t.node.as_ref()?;
        self.grads.get(node.id)?.as_deref()
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// Dense rank-N array of f32, row-major, optionally linked to a tape.
#[derive(Clone)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<Vec<f32>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{:?}[{} elems{}]",
            self.dims,
            self.numel(),
            if self.node.is_some() { ", taped" } else { "" }
        )
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    /// Constant tensor; rejects dims/data length mismatch and non-finite data.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        check_finite("tensor", &data)?;
        Ok(Tensor::constant(dims, data))
    }

    fn constant(dims: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor {
            dims,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::constant(dims.to_vec(), vec![0.0; n])
    }

    pub fn full(dims: &[usize], v: f32) -> Tensor {
        let n = dims.iter().product();
        Tensor::constant(dims.to_vec(), vec![v; n])
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::constant(vec![1], vec![v])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_taped(&self) -> bool {
        self.node.is_some()
    }

    /// Detached copy sharing the same storage.
    pub fn detach(&self) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// In-place elementwise update of the underlying storage. Copies first
    /// if the storage is shared (e.g. still referenced by a live tape).
    pub fn update<F: FnMut(usize, &mut f32)>(&mut self, mut f: F) {
        let data = Arc::make_mut(&mut self.data);
        for (i, v) in data.iter_mut().enumerate() {
            f(i, v);
        }
        self.node = None;
    }

    fn record(op: Op, inputs: &[&Tensor], dims: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        check_finite(op.name(), &data)?;
        let tape = inputs.iter().find_map(|t| t.node.as_ref().map(|n| &n.tape));
        let Some(tape) = tape else {
            return Ok(Tensor::constant(dims, data));
        };
        let srcs: Vec<Src> = inputs
            .iter()
            .map(|t| match &t.node {
                Some(n) => {
                    assert!(tape.same(&n.tape), "inputs recorded on different tapes");
                    Src::Node(n.id)
                }
                None => Src::Const(Value {
                    dims: t.dims.clone(),
                    data: Arc::clone(&t.data),
                }),
            })
            .collect();
        let data = Arc::new(data);
        let id = {
            let mut nodes = tape.inner.borrow_mut();
            nodes.push(TapeNode {
                op,
                srcs,
                value: Value {
                    dims: dims.clone(),
                    data: Arc::clone(&data),
                },
            });
            nodes.len() - 1
        };
        Ok(Tensor {
            dims,
            data,
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        })
    }

    fn binary_elementwise(
        &self,
        other: &Tensor,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::record(op, &[self, other], self.dims.clone(), data)
    }

    fn unary(&self, op: Op, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Tensor::record(op, &[self], self.dims.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, Op::Mul, |a, b| a * b)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (&self.dims[..], &other.dims[..]) else {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        // transpose rhs once so rows are contiguous for the dot kernel
        let mut bt = vec![0f32; n * k];
        for (l, row) in other.data.chunks_exact(n).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                bt[j * k + l] = v;
            }
        }
        let mut out = vec![0f32; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = conv::dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        Tensor::record(Op::Matmul, &[self, other], vec![m, n], out)
    }

    fn conv_geometry(
        &self,
        kernel: &Tensor,
        stride: usize,
        pad: usize,
        transpose: bool,
    ) -> Result<Conv2dDims> {
        let op = if transpose { "transpose_conv2d" } else { "conv2d" };
        let err = || Error::ShapeMismatch {
            op: if transpose { "transpose_conv2d" } else { "conv2d" },
            lhs: self.dims.clone(),
            rhs: kernel.dims.clone(),
        };
        let (&[n, c, h, w], &[k0, k1, kh, kw]) = (&self.dims[..], &kernel.dims[..]) else {
            return Err(err());
        };
        if transpose {
            // kernel is [in_ch, out_ch, kh, kw]; output spatial grows
            if k0 != c {
                return Err(err());
            }
            let oh = (h - 1) * stride + kh;
            if oh < 2 * pad {
                return Err(Error::Domain {
                    op,
                    msg: format!("padding {pad} exceeds output extent"),
                });
            }
            let (oh, ow) = ((h - 1) * stride + kh - 2 * pad, (w - 1) * stride + kw - 2 * pad);
            Conv2dDims::new(n, k1, oh, ow, c, kh, kw, stride, pad).ok_or_else(err)
        } else {
            // kernel is [out_ch, in_ch, kh, kw]
            if k1 != c {
                return Err(err());
            }
            Conv2dDims::new(n, c, h, w, k0, kh, kw, stride, pad).ok_or_else(err)
        }
    }

    /// 2-D convolution, NCHW input, `[out_ch, in_ch, kh, kw]` kernel.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let d = self.conv_geometry(kernel, stride, pad, false)?;
        let out = conv::conv2d_forward(&self.data, &kernel.data, &d);
        Tensor::record(
            Op::Conv2d { stride, pad },
            &[self, kernel],
            vec![d.n, d.oc, d.oh, d.ow],
            out,
        )
    }

    /// Transposed 2-D convolution (the adjoint of [`Tensor::conv2d`]),
    /// NCHW input, `[in_ch, out_ch, kh, kw]` kernel.
    pub fn transpose_conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let d = self.conv_geometry(kernel, stride, pad, true)?;
        // self plays the role of the convolution's output gradient
        let out = conv::conv2d_backward_input(&self.data, &kernel.data, &d);
        Tensor::record(
            Op::TransposeConv2d { stride, pad },
            &[self, kernel],
            vec![d.n, d.c, d.h, d.w],
            out,
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Op::Relu, |a| a.max(0.0))
    }

    pub fn leaky_relu(&self, slope: f32) -> Result<Tensor> {
        self.unary(Op::LeakyRelu { slope }, move |a| {
            if a > 0.0 {
                a
            } else {
                slope * a
            }
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Op::Sigmoid, |a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(Op::Tanh, f32::tanh)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp, f32::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("input {bad} is not strictly positive"),
            });
        }
        self.unary(Op::Log, f32::ln)
    }

    /// ln(1 + e^x), computed without overflow.
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(Op::Softplus, |a| a.max(0.0) + (-a.abs()).exp().ln_1p())
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::Domain {
                op: "clamp",
                msg: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary(Op::Clamp { lo, hi }, move |a| a.clamp(lo, hi))
    }

    /// a*x + b, elementwise with scalar coefficients.
    pub fn affine(&self, a: f32, b: f32) -> Result<Tensor> {
        self.unary(Op::Affine { a, b }, move |x| a * x + b)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.numel() || dims.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.dims.clone(),
                rhs: dims.to_vec(),
            });
        }
        Tensor::record(Op::Reshape, &[self], dims.to_vec(), self.data.to_vec())
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.dims.len() || start + len > self.dims[axis] || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                lhs: self.dims.clone(),
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let axis_len = self.dims[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims.clone();
        dims[axis] = len;
        Tensor::record(Op::Narrow { axis, start }, &[self], dims, out)
    }

    /// Expands size-1 axes to match `dims` (ranks must agree).
    pub fn broadcast_to(&self, dims: &[usize]) -> Result<Tensor> {
        if dims.len() != self.dims.len()
            || self
                .dims
                .iter()
                .zip(dims)
                .any(|(&f, &t)| f != t && f != 1)
        {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: self.dims.clone(),
                rhs: dims.to_vec(),
            });
        }
        let out = broadcast_data(&self.data, &self.dims, dims);
        Tensor::record(Op::Broadcast, &[self], dims.to_vec(), out)
    }

    /// Sum of all elements (f64 accumulation), scalar result.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().map(|&v| v as f64).sum();
        Tensor::record(Op::Sum, &[self], vec![1], vec![s as f32])
    }

    /// Mean of all elements, scalar result.
    pub fn mean(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().map(|&v| v as f64).sum();
        Tensor::record(Op::Mean, &[self], vec![1], vec![(s / self.numel() as f64) as f32])
    }
}

/// Concatenates along `axis`; all other dims must match.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::ShapeMismatch {
        op: "concat",
        lhs: vec![],
        rhs: vec![],
    })?;
    if axis >= first.dims.len() {
        return Err(Error::ShapeMismatch {
            op: "concat",
            lhs: first.dims.clone(),
            rhs: vec![axis],
        });
    }
    let mut axis_total = 0;
    for p in parts {
        if p.dims.len() != first.dims.len()
            || p.dims
                .iter()
                .zip(&first.dims)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.dims.clone(),
                rhs: p.dims.clone(),
            });
        }
        axis_total += p.dims[axis];
    }
    let outer: usize = first.dims[..axis].iter().product();
    let inner: usize = first.dims[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for p in parts {
            let alen = p.dims[axis];
            out.extend_from_slice(&p.data[o * alen * inner..(o + 1) * alen * inner]);
        }
    }
    let mut dims = first.dims.clone();
    dims[axis] = axis_total;
    Tensor::record(Op::Concat { axis }, parts, dims, out)
}

fn broadcast_data(src: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    // fast path: [1, C, 1, 1] -> [N, C, H, W] (per-channel bias)
    if let (&[1, c, 1, 1], &[n, c2, h, w]) = (from, to) {
        if c == c2 {
            let hw = h * w;
            let mut out = vec![0f32; n * c * hw];
            for chunk in out.chunks_exact_mut(hw * c) {
                for (ci, sub) in chunk.chunks_exact_mut(hw).enumerate() {
                    sub.fill(src[ci]);
                }
            }
            return out;
        }
    }
    // fast path: [1, f] -> [n, f] (row repeat)
    if let (&[1, f], &[n, f2]) = (from, to) {
        if f == f2 {
            let mut out = Vec::with_capacity(n * f);
            for _ in 0..n {
                out.extend_from_slice(src);
            }
            return out;
        }
    }
    let total: usize = to.iter().product();
    let mut from_strides = vec![0usize; from.len()];
    let mut acc = 1;
    for i in (0..from.len()).rev() {
        from_strides[i] = if from[i] == 1 { 0 } else { acc };
        acc *= from[i];
    }
    let mut out = vec![0f32; total];
    let mut idx = vec![0usize; to.len()];
    for slot in out.iter_mut() {
        let off: usize = idx.iter().zip(&from_strides).map(|(i, s)| i * s).sum();
        *slot = src[off];
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Sums `grad` (shaped `to`) back down to `from`, inverting a broadcast.
fn reduce_broadcast(grad: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    if let (&[1, c, 1, 1], &[_, c2, h, w]) = (from, to) {
        if c == c2 {
            let hw = h * w;
            let mut out = vec![0f32; c];
            for chunk in grad.chunks_exact(hw * c) {
                for (ci, sub) in chunk.chunks_exact(hw).enumerate() {
                    out[ci] += sub.iter().sum::<f32>();
                }
            }
            return out;
        }
    }
    if let (&[1, f], &[_, f2]) = (from, to) {
        if f == f2 {
            let mut out = vec![0f32; f];
            for row in grad.chunks_exact(f) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            return out;
        }
    }
    let from_total: usize = from.iter().product();
    let mut from_strides = vec![0usize; from.len()];
    let mut acc = 1;
    for i in (0..from.len()).rev() {
        from_strides[i] = if from[i] == 1 { 0 } else { acc };
        acc *= from[i];
    }
    let mut out = vec![0f32; from_total];
    let mut idx = vec![0usize; to.len()];
    for &g in grad {
        let off: usize = idx.iter().zip(&from_strides).map(|(i, s)| i * s).sum();
        out[off] += g;
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Per-op gradient rules. Returns one optional contribution per source,
/// aligned with the node's input order.
fn backward_op(op: &Op, gout: &[f32], value: &Value, srcs: &[&Value]) -> Vec<Option<Vec<f32>>> {
    match op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
        Op::Sub => vec![
            Some(gout.to_vec()),
            Some(gout.iter().map(|g| -g).collect()),
        ],
        Op::Mul => {
            let (a, b) = (&srcs[0].data, &srcs[1].data);
            vec![
                Some(gout.iter().zip(b.iter()).map(|(g, v)| g * v).collect()),
                Some(gout.iter().zip(a.iter()).map(|(g, v)| g * v).collect()),
            ]
        }
        Op::Matmul => {
            let (a, b) = (srcs[0], srcs[1]);
            let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
            // da[i,l] = sum_j gout[i,j] * b[l,j]
            let mut da = vec![0f32; m * k];
            for i in 0..m {
                let grow = &gout[i * n..(i + 1) * n];
                for l in 0..k {
                    let mut s = 0f32;
                    for j in 0..n {
                        s += grow[j] * b.data[l * n + j];
                    }
                    da[i * k + l] = s;
                }
            }
            // db[l,j] = sum_i a[i,l] * gout[i,j]
            let mut db = vec![0f32; k * n];
            for i in 0..m {
                let grow = &gout[i * n..(i + 1) * n];
                for l in 0..k {
                    conv::axpy(a.data[i * k + l], grow, &mut db[l * n..(l + 1) * n]);
                }
            }
            vec![Some(da), Some(db)]
        }
        Op::Conv2d { stride, pad } => {
            let (x, w) = (srcs[0], srcs[1]);
            let d = Conv2dDims::new(
                x.dims[0], x.dims[1], x.dims[2], x.dims[3], w.dims[0], w.dims[2], w.dims[3],
                *stride, *pad,
            )
            .expect("geometry validated at forward time");
            vec![
                Some(conv::conv2d_backward_input(gout, &w.data, &d)),
                Some(conv::conv2d_backward_kernel(&x.data, gout, &d)),
            ]
        }
        Op::TransposeConv2d { stride, pad } => {
            let (x, w) = (srcs[0], srcs[1]);
            // forward was conv2d_backward_input with x in the dy role;
            // value holds the grown output, which plays the conv input role
            let d = Conv2dDims::new(
                value.dims[0],
                value.dims[1],
                value.dims[2],
                value.dims[3],
                x.dims[1],
                w.dims[2],
                w.dims[3],
                *stride,
                *pad,
            )
            .expect("geometry validated at forward time");
            vec![
                Some(conv::conv2d_forward(gout, &w.data, &d)),
                Some(conv::conv2d_backward_kernel(gout, &x.data, &d)),
            ]
        }
        Op::Relu => {
            let x = &srcs[0].data;
            vec![Some(
                gout.iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::LeakyRelu { slope } => {
            let x = &srcs[0].data;
            vec![Some(
                gout.iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                    .collect(),
            )]
        }
        Op::Sigmoid => {
            let y = &value.data;
            vec![Some(
                gout.iter()
                    .zip(y.iter())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect(),
            )]
        }
        Op::Tanh => {
            let y = &value.data;
            vec![Some(
                gout.iter()
                    .zip(y.iter())
                    .map(|(g, &t)| g * (1.0 - t * t))
                    .collect(),
            )]
        }
        Op::Exp => {
            let y = &value.data;
            vec![Some(gout.iter().zip(y.iter()).map(|(g, &e)| g * e).collect())]
        }
        Op::Log => {
            let x = &srcs[0].data;
            vec![Some(gout.iter().zip(x.iter()).map(|(g, &v)| g / v).collect())]
        }
        Op::Softplus => {
            let x = &srcs[0].data;
            vec![Some(
                gout.iter()
                    .zip(x.iter())
                    .map(|(g, &v)| {
                        let s = if v >= 0.0 {
                            1.0 / (1.0 + (-v).exp())
                        } else {
                            let e = v.exp();
                            e / (1.0 + e)
                        };
                        g * s
                    })
                    .collect(),
            )]
        }
        Op::Clamp { lo, hi } => {
            let x = &srcs[0].data;
            vec![Some(
                gout.iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Affine { a, .. } => vec![Some(gout.iter().map(|g| g * a).collect())],
        Op::Reshape => vec![Some(gout.to_vec())],
        Op::Narrow { axis, start } => {
            let from = srcs[0];
            let outer: usize = from.dims[..*axis].iter().product();
            let inner: usize = from.dims[*axis + 1..].iter().product();
            let axis_len = from.dims[*axis];
            let len = value.dims[*axis];
            let mut dx = vec![0f32; from.data.len()];
            for o in 0..outer {
                let dst = (o * axis_len + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
            }
            vec![Some(dx)]
        }
        Op::Concat { axis } => {
            let outer: usize = value.dims[..*axis].iter().product();
            let inner: usize = value.dims[*axis + 1..].iter().product();
            let mut outs: Vec<Option<Vec<f32>>> = srcs
                .iter()
                .map(|s| Some(vec![0f32; s.data.len()]))
                .collect();
            let mut offset = 0;
            let total_axis = value.dims[*axis];
            for (pi, s) in srcs.iter().enumerate() {
                let alen = s.dims[*axis];
                let dst = outs[pi].as_mut().expect("just allocated");
                for o in 0..outer {
                    let src = (o * total_axis + offset) * inner;
                    let d = o * alen * inner;
                    dst[d..d + alen * inner].copy_from_slice(&gout[src..src + alen * inner]);
                }
                offset += alen;
            }
            outs
        }
        Op::Broadcast => {
            let from = srcs[0];
            vec![Some(reduce_broadcast(gout, &from.dims, &value.dims))]
        }
        Op::Sum => {
            let n = srcs[0].data.len();
            vec![Some(vec![gout[0]; n])]
        }
        Op::Mean => {
            let n = srcs[0].data.len();
            vec![Some(vec![gout[0] / n as f32; n])]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.watch(&t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let root = x.sum().unwrap();
        let g = tape.backward(&root).unwrap();
        assert_eq!(g.get_data(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.watch(&t(&[1], &[0.0]));
        let root = x.sigmoid().unwrap().sum().unwrap();
        let g = tape.backward(&root).unwrap();
        assert!((g.get_data(&x).unwrap()[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn fan_in_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.watch(&t(&[1], &[3.0]));
        let root = x.mul(&x).unwrap().add(&x).unwrap().sum().unwrap();
        let g = tape.backward(&root).unwrap();
        assert!((g.get_data(&x).unwrap()[0] - 7.0).abs() < 1e-5);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.watch(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(&x),
            Err(Error::NonScalarRoot(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_op_and_dims() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn log_domain_checked() {
        let a = t(&[2], &[1.0, 0.0]);
        assert!(matches!(a.log(), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn exp_overflow_raises_not_propagates() {
        let a = t(&[1], &[200.0]);
        assert!(matches!(a.exp(), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn conv_shape_example() {
        let x = t(&[1, 1, 64, 64], &vec![0.5; 64 * 64]);
        let w = t(&[3, 1, 4, 4], &vec![0.1; 3 * 16]);
        let y = x.conv2d(&w, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 3, 32, 32]);
    }

    #[test]
    fn conv_then_transpose_conv_restores_spatial_dims() {
        for (h, w, k, s, p) in [(64usize, 64usize, 4usize, 2usize, 1usize), (16, 16, 3, 1, 1), (10, 8, 4, 2, 1)] {
            let x = t(&[1, 2, h, w], &vec![0.3; 2 * h * w]);
            let wk = t(&[3, 2, k, k], &vec![0.05; 3 * 2 * k * k]);
            let y = x.conv2d(&wk, s, p).unwrap();
            let wt = t(&[3, 2, k, k], &vec![0.05; 3 * 2 * k * k]);
            let back = y.transpose_conv2d(&wt, s, p).unwrap();
            assert_eq!(&back.dims()[2..], &[h, w], "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.dims(), &[2, 5]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let a2 = c.narrow(1, 0, 2).unwrap();
        assert_eq!(a2.data(), a.data());
        let b2 = c.narrow(1, 2, 3).unwrap();
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn broadcast_bias_and_reduce() {
        let tape = Tape::new();
        let b = tape.watch(&t(&[1, 2, 1, 1], &[1.0, 2.0]));
        let big = b.broadcast_to(&[2, 2, 2, 2]).unwrap();
        assert_eq!(big.data()[0..4], [1.0; 4]);
        assert_eq!(big.data()[4..8], [2.0; 4]);
        let root = big.sum().unwrap();
        let g = tape.backward(&root).unwrap();
        assert_eq!(g.get_data(&b).unwrap(), &[8.0, 8.0]);
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }
}
