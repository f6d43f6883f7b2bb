//! Raw numeric kernels shared by the tape and by the tape-free inference paths.

use crate::error::{Error, Result};

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], offset: usize, row_stride: usize, col_stride: usize) -> Self {
        MatRef {
            data,
            offset,
            row_stride,
            col_stride,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "gemm operand out of bounds");
    }
}

/// `C[m×n] = A[m×k]·B[k×n] + beta·C` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
    c_col_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last_c = c_offset + (m - 1) * c_row_stride + (n - 1) * c_col_stride;
    assert!(last_c < c.len(), "gemm output out of bounds");
    // SAFETY: all three operands were bounds-checked above for the full
    // extent the kernel will touch, and `c` is borrowed mutably and
    // cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            c_col_stride as isize,
        );
    }
}

/// Dot product with four independent accumulators so the compiler can
/// vectorise it.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub time: usize,
    pub taps: usize,
    pub dilation: usize,
}

impl ConvDims {
    pub fn infer(input: &[usize], weight: &[usize], dilation: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::InvalidDilation(dilation));
        }
        if input.len() != 3 || weight.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        if weight[2] == 0 {
            return Err(Error::InvalidShape {
                op: "causal_conv1d",
                shape: weight.to_vec(),
                reason: "filter size must be at least 1".into(),
            });
        }
        if input[1] != weight[1] {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d (channels)",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        Ok(ConvDims {
            batch: input[0],
            cin: input[1],
            cout: weight[0],
            time: input[2],
            taps: weight[2],
            dilation,
        })
    }

    /// How far back tap `k` looks.
    #[inline]
    pub fn lag(&self, k: usize) -> usize {
        (self.taps - 1 - k) * self.dilation
    }
}

/// Causal dilated convolution with implicit zero left-padding:
/// `out[b,o,t] = bias[o] + Σ_{i,k} w[o,i,k] · x[b,i,t − (F−1−k)·d]`.
pub(crate) fn conv1d_forward(
    dims: ConvDims,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let ConvDims {
        batch,
        cin,
        cout,
        time,
        taps,
        ..
    } = dims;
    let mut out = vec![0.0; batch * cout * time];
    for b in 0..batch {
        let x_off = b * cin * time;
        let y_off = b * cout * time;
        for k in 0..taps {
            let lag = dims.lag(k);
            if lag >= time {
                continue;
            }
            gemm(
                cout,
                cin,
                time - lag,
                MatRef::new(weight, k, cin * taps, taps),
                MatRef::new(input, x_off, time, 1),
                1.0,
                &mut out,
                y_off + lag,
                time,
                1,
            );
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut out[y_off + o * time..y_off + (o + 1) * time] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv1d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    dims: ConvDims,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let ConvDims {
        batch,
        cin,
        cout,
        time,
        taps,
        ..
    } = dims;
    for b in 0..batch {
        let x_off = b * cin * time;
        let y_off = b * cout * time;
        for k in 0..taps {
            let lag = dims.lag(k);
            if lag >= time {
                continue;
            }
            let n = time - lag;
            if let Some(gi) = grad_input.as_deref_mut() {
                // gx[i, 0..n] += Wkᵀ · gy[:, lag..]
                gemm(
                    cin,
                    cout,
                    n,
                    MatRef::new(weight, k, taps, cin * taps),
                    MatRef::new(grad_out, y_off + lag, time, 1),
                    1.0,
                    gi,
                    x_off,
                    time,
                    1,
                );
            }
            if let Some(gw) = grad_weight.as_deref_mut() {
                // gWk += gy[:, lag..] · x[:, 0..n]ᵀ
                gemm(
                    cout,
                    n,
                    cin,
                    MatRef::new(grad_out, y_off + lag, time, 1),
                    MatRef::new(input, x_off, 1, time),
                    1.0,
                    gw,
                    k,
                    cin * taps,
                    taps,
                );
            }
        }
    }
    if let Some(gb) = grad_bias {
        for b in 0..batch {
            for (o, g) in gb.iter_mut().enumerate() {
                let row = &grad_out[(b * cout + o) * time..(b * cout + o + 1) * time];
                *g += row.iter().sum::<f64>();
            }
        }
    }
}

/// Result shape of a rank-matched broadcast, where each dimension must be
/// equal or 1 on one side.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// Row-major strides of `shape` read against `out`, with 0 on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output position of a broadcast with the matching flat
/// offsets into both operands.
pub(crate) fn broadcast_for_each(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * last;
        for j in 0..last {
            f(base + j, oa + j * la, ob + j * lb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// `(outer, dim, inner)` split of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 − e^{−x})` for `x > 0`.
#[inline]
pub fn log1mexp(x: f64) -> f64 {
    if x < std::f64::consts::LN_2 {
        (-(-x).exp_m1()).ln()
    } else {
        (-(-x).exp()).ln_1p()
    }
}
