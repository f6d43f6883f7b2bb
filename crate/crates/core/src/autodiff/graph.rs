use std::collections::BTreeMap;

use super::kernels::{
    self, axis_split, broadcast_for_each, broadcast_shape, broadcast_strides, ConvDims,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    Relu,
    Square,
    /// `ln(1 − e^{−x})`, defined for `x > 0`.
    Log1mExp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Unary(Var, UnaryKind),
    Binary(Var, Var, BinaryKind),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    ShiftRight(Var, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    TransposeLast(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    LogSumExp(Var, usize),
    Frames {
        input: Var,
        window: usize,
        hop: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(_, k) => match k {
                UnaryKind::Neg => "neg",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Softplus => "softplus",
                UnaryKind::Relu => "relu",
                UnaryKind::Square => "square",
                UnaryKind::Log1mExp => "log1mexp",
            },
            Op::Binary(_, _, k) => match k {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Clamp(..) => "clamp",
            Op::Conv1d { .. } => "causal_conv1d",
            Op::ShiftRight(..) => "shift_right",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::TransposeLast(..) => "transpose",
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::LogSumExp(..) => "logsumexp",
            Op::Frames { .. } => "frames",
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Define-by-run tape. Every operation appends a node whose inputs are
/// already on the tape, so node order is a topological order.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) named: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An anonymous leaf whose gradient is tracked (for input sensitivities).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable leaf. Binding the same name twice returns the same
    /// node, so gradients from every use accumulate into one entry.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First node holding a non-finite value, with the op that produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    // ---- elementwise -------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Sigmoid => kernels::sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Softplus => kernels::softplus,
            UnaryKind::Relu => |x| x.max(0.0),
            UnaryKind::Square => |x| x * x,
            UnaryKind::Log1mExp => kernels::log1mexp,
        };
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(value, Op::Unary(a, kind), ng)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(kind_name(kind), &sa, &sb)?;
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![0.0; n];
            let ta = broadcast_strides(&sa, &out_shape);
            let tb = broadcast_strides(&sb, &out_shape);
            broadcast_for_each(&out_shape, &ta, &tb, |o, i, j| out[o] = f(va[i], vb[j]));
            out
        };
        let value = Tensor::new(out_shape, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary(a, b, kind), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn log1mexp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log1mExp, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        let ng = self.needs(a);
        self.push(value, Op::Offset(a), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    // ---- convolution and time-axis ops ------------------------------

    /// Causal dilated convolution; see [`kernels::conv1d_forward`].
    /// `bias`, when given, has shape `[Cout]`.
    pub fn causal_conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        let dims = ConvDims::infer(self.shape(input), self.shape(weight), dilation)?;
        if let Some(b) = bias {
            if self.shape(b) != [dims.cout] {
                return Err(Error::ShapeMismatch {
                    op: "causal_conv1d (bias)",
                    left: self.shape(weight).to_vec(),
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let data = kernels::conv1d_forward(
            dims,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![dims.batch, dims.cout, dims.time], data)?;
        let ng = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            },
            ng,
        ))
    }

    /// Delays the last axis by `steps`, filling the front with zeros.
    pub fn shift_right(&mut self, a: Var, steps: usize) -> Result<Var> {
        let src = self.value(a);
        let t = *src.shape().last().ok_or_else(|| Error::InvalidShape {
            op: "shift_right",
            shape: vec![],
            reason: "needs a time axis".into(),
        })?;
        let mut data = vec![0.0; src.len()];
        if steps < t {
            for (dst, row) in data.chunks_mut(t).zip(src.data().chunks(t)) {
                dst[steps..].copy_from_slice(&row[..t - steps]);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::ShiftRight(a, steps), ng))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape,
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Slice { input: a, axis, start }, ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_elsewhere = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same_elsewhere {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape,
                reason: "needs rank >= 2".into(),
            });
        }
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product::<usize>();
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        let mut out = shape;
        out.swap(r - 2, r - 1);
        let value = Tensor::new(out, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::TransposeLast(a), ng))
    }

    /// `[.., m, k] × [.., k, n]` with identical leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                kernels::MatRef::new(va, bi * m * k, k, 1),
                kernels::MatRef::new(vb, bi * k * n, n, 1),
                0.0,
                &mut data,
                bi * m * n,
                n,
                1,
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.needs(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                shape,
                reason: format!("no axis {axis}"),
            });
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out = shape;
        out[axis] = 1;
        let value = Tensor::new(out, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SumAxis(a, axis), ng))
    }

    /// `ln Σ exp` over `axis` (kept with size 1), shifted by the maximum so
    /// large inputs do not overflow.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "logsumexp",
                shape,
                reason: format!("no axis {axis}"),
            });
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| src[(o * dim + d) * inner + i];
                let m = (0..dim).map(at).fold(f64::NEG_INFINITY, f64::max);
                data[o * inner + i] = if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + (0..dim).map(|d| (at(d) - m).exp()).sum::<f64>().ln()
                };
            }
        }
        let mut out = shape;
        out[axis] = 1;
        let value = Tensor::new(out, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::LogSumExp(a, axis), ng))
    }

    /// Overlapping frames of a `[B, T]` signal: `[B, n_frames, window]`
    /// with `n_frames = 1 + (T − window) / hop`.
    pub fn frames(&mut self, a: Var, window: usize, hop: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || hop == 0 || window == 0 || shape[1] < window {
            return Err(Error::InvalidShape {
                op: "frames",
                shape,
                reason: format!("window {window}, hop {hop}"),
            });
        }
        let (batch, t) = (shape[0], shape[1]);
        let nf = 1 + (t - window) / hop;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(batch * nf * window);
        for b in 0..batch {
            for f in 0..nf {
                let s = b * t + f * hop;
                data.extend_from_slice(&src[s..s + window]);
            }
        }
        let value = Tensor::new(vec![batch, nf, window], data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Frames { input: a, window, hop }, ng))
    }
}

fn kind_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}
