//! Tape-free generation for sampling and benchmarking.

use rayon::prelude::*;

use super::{flow_layer_param, flow_param, FlowStack, StudentOutput, FLOW_LOG_SCALE_BOUND};
use crate::autodiff::kernels::{conv1d_forward, sigmoid, ConvDims};
use crate::error::{Error, Result};
use crate::teacher::ConditioningSeq;
use crate::tensor::Tensor;

/// How [`FlowStack::generate_parallel`] splits the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParallelOptions {
    pub threads: usize,
    /// Output positions per work item (before the left halo is added).
    pub chunk: usize,
}

impl Default for ParallelOptions {
    fn default() -> Self {
        ParallelOptions {
            threads: 1,
            chunk: 4096,
        }
    }
}

fn conv(
    input: &[f64],
    shape: [usize; 3],
    weight: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
) -> Result<Vec<f64>> {
    let dims = ConvDims::infer(&shape, weight.shape(), dilation)?;
    if input.len() != shape.iter().product::<usize>() {
        return Err(Error::InvalidShape {
            op: "conv",
            shape: shape.to_vec(),
            reason: format!("buffer holds {} values", input.len()),
        });
    }
    Ok(conv1d_forward(dims, input, weight.data(), bias.map(Tensor::data)))
}

impl FlowStack {
    fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// `(μ^i, ln s^i)` of flow `flow` as flat `[B·T]` buffers.
    pub fn flow_params_plain(
        &self,
        flow: usize,
        x_prev: &Tensor,
        cond: &Tensor,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (b, t) = (x_prev.shape()[0], x_prev.shape()[2]);
        let cc = cond.shape()[1];
        let r = self.config.residual_channels;
        let gch = self.config.gate_channels;
        let mut shifted = vec![0.0; b * t];
        for (dst, src) in shifted.chunks_mut(t).zip(x_prev.data().chunks(t)) {
            dst[1..].copy_from_slice(&src[..t - 1]);
        }
        let mut h = conv(
            &shifted,
            [b, 1, t],
            self.param(&flow_param(flow, "input.w"))?,
            Some(self.param(&flow_param(flow, "input.b"))?),
            1,
        )?;
        for (j, d) in self.config.dilations(flow).into_iter().enumerate() {
            let mut z = conv(
                &h,
                [b, r, t],
                self.param(&flow_layer_param(flow, j, "conv.w"))?,
                Some(self.param(&flow_layer_param(flow, j, "conv.b"))?),
                d,
            )?;
            let zc = conv(
                cond.data(),
                [b, cc, t],
                self.param(&flow_layer_param(flow, j, "cond.w"))?,
                None,
                1,
            )?;
            for (a, c) in z.iter_mut().zip(&zc) {
                *a += c;
            }
            let mut gated = vec![0.0; b * gch * t];
            for row in 0..b {
                let zr = &z[row * 2 * gch * t..(row + 1) * 2 * gch * t];
                let (filt, gate) = zr.split_at(gch * t);
                for ((o, &f), &gv) in gated[row * gch * t..(row + 1) * gch * t]
                    .iter_mut()
                    .zip(filt)
                    .zip(gate)
                {
                    *o = f.tanh() * sigmoid(gv);
                }
            }
            let res = conv(
                &gated,
                [b, gch, t],
                self.param(&flow_layer_param(flow, j, "res.w"))?,
                Some(self.param(&flow_layer_param(flow, j, "res.b"))?),
                1,
            )?;
            for (hv, rv) in h.iter_mut().zip(&res) {
                *hv += rv;
            }
        }
        let out = conv(
            &h,
            [b, r, t],
            self.param(&flow_param(flow, "out.w"))?,
            Some(self.param(&flow_param(flow, "out.b"))?),
            1,
        )?;
        let mut mu = Vec::with_capacity(b * t);
        let mut log_s = Vec::with_capacity(b * t);
        for row in out.chunks(2 * t) {
            mu.extend_from_slice(&row[..t]);
            log_s.extend(
                row[t..]
                    .iter()
                    .map(|v| v.clamp(-FLOW_LOG_SCALE_BOUND, FLOW_LOG_SCALE_BOUND)),
            );
        }
        Ok((mu, log_s))
    }

    /// All flows on plain buffers; `cond` is already upsampled to `T`.
    pub fn generate_plain(&self, z: &Tensor, cond: &Tensor) -> Result<StudentOutput> {
        let shape = z.shape().to_vec();
        let mut x = z.clone();
        let mut mu_tot = vec![0.0; z.len()];
        let mut log_s_tot = vec![0.0; z.len()];
        let mut per_flow = Vec::with_capacity(self.config.num_flows());
        for i in 0..self.config.num_flows() {
            let (mu, log_s) = self.flow_params_plain(i, &x, cond)?;
            for k in 0..x.len() {
                let s = log_s[k].exp();
                x.data_mut()[k] = x.data()[k] * s + mu[k];
                if i == 0 {
                    mu_tot[k] = mu[k];
                    log_s_tot[k] = log_s[k];
                } else {
                    mu_tot[k] = mu_tot[k] * s + mu[k];
                    log_s_tot[k] += log_s[k];
                }
            }
            if !x.is_finite() {
                return Err(Error::FlowNonFinite { flow: i });
            }
            per_flow.push((Tensor::new(shape.clone(), mu)?, Tensor::new(shape.clone(), log_s)?));
        }
        Ok(StudentOutput {
            x,
            mu_tot: Tensor::new(shape.clone(), mu_tot)?,
            log_s_tot: Tensor::new(shape, log_s_tot)?,
            per_flow,
        })
    }

    /// Parallel sampling split into time chunks, also with a single thread
    /// (chunks keep the working set cache-sized). Each chunk is computed
    /// with enough left context that its outputs match a single full pass.
    /// Only `x` is returned.
    pub fn generate_parallel(
        &self,
        z: &Tensor,
        c: &ConditioningSeq,
        opts: ParallelOptions,
    ) -> Result<Tensor> {
        let (b, t) = (z.shape()[0], z.shape()[2]);
        let cond = c.upsample(t)?;
        if opts.chunk == 0 || opts.chunk >= t {
            return Ok(self.generate_plain(z, &cond)?.x);
        }
        let halo = self.config.total_receptive_field();
        let starts: Vec<usize> = (0..t).step_by(opts.chunk).collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        let pieces: Vec<Result<Tensor>> = pool.install(|| {
            starts
                .par_iter()
                .map(|&start| {
                    let end = (start + opts.chunk).min(t);
                    let lo = start.saturating_sub(halo);
                    let out = self.generate_plain(
                        &z.narrow_last(lo, end),
                        &cond.narrow_last(lo, end),
                    )?;
                    Ok(out.x.narrow_last(start - lo, end - lo))
                })
                .collect()
        });
        let mut data = vec![0.0; b * t];
        for (piece, &start) in pieces.into_iter().zip(&starts) {
            let piece = piece?;
            let len = piece.shape()[2];
            for row in 0..b {
                data[row * t + start..row * t + start + len]
                    .copy_from_slice(&piece.data()[row * len..(row + 1) * len]);
            }
        }
        Tensor::new(vec![b, 1, t], data)
    }
}
