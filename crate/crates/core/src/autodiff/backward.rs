use std::collections::BTreeMap;

use super::graph::{BinaryKind, Graph, Op, UnaryKind, Var};
use super::kernels::{self, axis_split, broadcast_for_each, broadcast_strides, MatRef};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients of one scalar loss with respect to every tracked leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, (Var, Vec<usize>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter; zeros when the loss did not depend on it.
    pub fn get(&self, name: &str) -> Option<Tensor> {
        let (v, shape) = self.named.get(name)?;
        Some(self.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(shape)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    /// `(name, gradient)` for every named parameter, in name order.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        let named = std::mem::take(&mut self.named);
        named
            .into_iter()
            .map(|(name, (v, shape))| {
                let g = self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&shape));
                (name, g)
            })
            .collect()
    }
}

impl Graph {
    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            let (node, op) = self
                .first_non_finite()
                .unwrap_or((loss.0, self.nodes[loss.0].op.name()));
            return Err(Error::NonFinite { node, op });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
        }

        let named = self
            .named
            .iter()
            .map(|(k, &v)| (k.clone(), (v, self.value(v).shape().to_vec())))
            .collect();
        Ok(Gradients { grads, named })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Unary(a, kind) => {
                let x = self.value(a).data();
                let yd = y.data();
                let gd = g.data();
                let data: Vec<f64> = (0..gd.len())
                    .map(|i| {
                        let d = match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Sigmoid => yd[i] * (1.0 - yd[i]),
                            UnaryKind::Tanh => 1.0 - yd[i] * yd[i],
                            UnaryKind::Exp => yd[i],
                            UnaryKind::Log => 1.0 / x[i],
                            UnaryKind::Softplus => kernels::sigmoid(x[i]),
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Square => 2.0 * x[i],
                            UnaryKind::Log1mExp => 1.0 / x[i].exp_m1(),
                        };
                        gd[i] * d
                    })
                    .collect();
                self.accumulate(grads, a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            &Op::Binary(a, b, kind) => self.binary_backward(a, b, kind, g, grads),
            &Op::Scale(a, f) => self.accumulate(grads, a, g.map(|v| v * f)),
            &Op::Offset(a) => self.accumulate(grads, a, g.clone()),
            &Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            &Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            } => {
                let xin = self.value(input);
                let w = self.value(weight);
                let mut gi = self.tracked(input).then(|| Tensor::zeros(xin.shape()));
                let mut gw = self.tracked(weight).then(|| Tensor::zeros(w.shape()));
                let mut gb = bias
                    .filter(|&b| self.tracked(b))
                    .map(|_| Tensor::zeros(&[dims.cout]));
                kernels::conv1d_backward(
                    dims,
                    xin.data(),
                    w.data(),
                    g.data(),
                    gi.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, input, gi);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::ShiftRight(a, steps) => {
                let t = *g.shape().last().unwrap();
                let mut data = vec![0.0; g.len()];
                if steps < t {
                    for (dst, row) in data.chunks_mut(t).zip(g.data().chunks(t)) {
                        dst[..t - steps].copy_from_slice(&row[steps..]);
                    }
                }
                self.accumulate(grads, a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            &Op::Slice { input, axis, start } => {
                let in_shape = self.shape(input).to_vec();
                let (outer, dim, inner) = axis_split(&in_shape, axis);
                let len = g.shape()[axis];
                let mut data = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    data[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, input, Tensor::new(in_shape, data).unwrap());
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.shape(v).to_vec();
                    let d = shape[*axis];
                    if self.tracked(v) {
                        let mut data = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[s..s + d * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(shape, data).unwrap());
                    }
                    offset += d;
                }
            }
            &Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                self.accumulate(grads, a, g.clone().reshape(&shape).unwrap());
            }
            &Op::TransposeLast(a) => {
                let shape = self.shape(a).to_vec();
                let r = shape.len();
                let (m, n) = (shape[r - 2], shape[r - 1]);
                let batch = g.len() / (m * n).max(1);
                let mut data = vec![0.0; g.len()];
                for b in 0..batch {
                    let off = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            data[off + i * n + j] = g.data()[off + j * m + i];
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(shape, data).unwrap());
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch: usize = sa[..r - 2].iter().product();
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.tracked(a) {
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..batch {
                        // gA = g · Bᵀ
                        kernels::gemm(
                            m,
                            n,
                            k,
                            MatRef::new(g.data(), bi * m * n, n, 1),
                            MatRef::new(vb, bi * k * n, 1, n),
                            0.0,
                            &mut ga,
                            bi * m * k,
                            k,
                            1,
                        );
                    }
                    self.accumulate(grads, a, Tensor::new(sa.clone(), ga).unwrap());
                }
                if self.tracked(b) {
                    let mut gb = vec![0.0; vb.len()];
                    for bi in 0..batch {
                        // gB = Aᵀ · g
                        kernels::gemm(
                            k,
                            m,
                            n,
                            MatRef::new(va, bi * m * k, 1, k),
                            MatRef::new(g.data(), bi * m * n, n, 1),
                            0.0,
                            &mut gb,
                            bi * k * n,
                            n,
                            1,
                        );
                    }
                    self.accumulate(grads, b, Tensor::new(sb, gb).unwrap());
                }
            }
            &Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, g.item()));
            }
            &Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).len() as f64;
                self.accumulate(grads, a, Tensor::full(&shape, g.item() / n));
            }
            &Op::SumAxis(a, axis) => {
                let shape = self.shape(a).to_vec();
                let (outer, dim, inner) = axis_split(&shape, axis);
                let mut data = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        data[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                            .copy_from_slice(src);
                    }
                }
                self.accumulate(grads, a, Tensor::new(shape, data).unwrap());
            }
            &Op::LogSumExp(a, axis) => {
                let shape = self.shape(a).to_vec();
                let (outer, dim, inner) = axis_split(&shape, axis);
                let x = self.value(a).data();
                let mut data = vec![0.0; x.len()];
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            let at = (o * dim + d) * inner + i;
                            let yo = y.data()[o * inner + i];
                            let w = if yo == f64::NEG_INFINITY {
                                0.0
                            } else {
                                (x[at] - yo).exp()
                            };
                            data[at] = g.data()[o * inner + i] * w;
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::new(shape, data).unwrap());
            }
            &Op::Frames { input, window, hop } => {
                let shape = self.shape(input).to_vec();
                let (batch, t) = (shape[0], shape[1]);
                let nf = g.shape()[1];
                let mut data = vec![0.0; batch * t];
                for b in 0..batch {
                    for f in 0..nf {
                        let src = &g.data()[(b * nf + f) * window..(b * nf + f + 1) * window];
                        let dst = &mut data[b * t + f * hop..b * t + f * hop + window];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, input, Tensor::new(shape, data).unwrap());
            }
        }
    }

    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        kind: BinaryKind,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (va, vb) = (ta.data(), tb.data());
        let (want_a, want_b) = (self.tracked(a), self.tracked(b));
        let mut ga = want_a.then(|| vec![0.0; va.len()]);
        let mut gb = want_b.then(|| vec![0.0; vb.len()]);
        let gd = g.data();
        let mut visit = |o: usize, i: usize, j: usize| {
            let gv = gd[o];
            let (da, db) = match kind {
                BinaryKind::Add => (1.0, 1.0),
                BinaryKind::Sub => (1.0, -1.0),
                BinaryKind::Mul => (vb[j], va[i]),
                BinaryKind::Div => (1.0 / vb[j], -va[i] / (vb[j] * vb[j])),
            };
            if let Some(ga) = ga.as_mut() {
                ga[i] += gv * da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[j] += gv * db;
            }
        };
        if ta.shape() == tb.shape() {
            for o in 0..gd.len() {
                visit(o, o, o);
            }
        } else {
            let out = g.shape();
            let sa = broadcast_strides(ta.shape(), out);
            let sb = broadcast_strides(tb.shape(), out);
            broadcast_for_each(out, &sa, &sb, visit);
        }
        if let Some(ga) = ga {
            self.accumulate(grads, a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
        }
        if let Some(gb) = gb {
            self.accumulate(grads, b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
        }
    }
}
