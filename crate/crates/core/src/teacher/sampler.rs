//! Ancestral sampling from the teacher.
//!
//! The cached sampler keeps, for every convolution, a ring of the past
//! inputs it reads, so one timestep costs a fixed amount of work instead of
//! a forward pass over the whole prefix.

use super::{layer_name, ConditioningSeq, TeacherNet};
use crate::autodiff::{dot, sigmoid};
use crate::distributions::{mol_sample, MixtureOfLogistics, LOG_SCALE_MIN};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Fixed-length history of channel vectors. `get(lag)` returns the vector
/// pushed `lag` steps ago (`1 ≤ lag ≤ len`).
#[derive(Clone, Debug)]
pub struct CircularBuffer {
    data: Vec<f64>,
    channels: usize,
    len: usize,
    head: usize,
}

impl CircularBuffer {
    pub fn new(len: usize, channels: usize) -> Self {
        CircularBuffer {
            data: vec![0.0; len * channels],
            channels,
            len,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, v: &[f64]) {
        if self.len == 0 {
            return;
        }
        let c = self.channels;
        self.data[self.head * c..(self.head + 1) * c].copy_from_slice(v);
        self.head = (self.head + 1) % self.len;
    }

    pub fn get(&self, lag: usize) -> &[f64] {
        assert!(lag >= 1 && lag <= self.len, "lag {lag} outside 1..={}", self.len);
        let slot = (self.head + self.len - lag) % self.len;
        &self.data[slot * self.channels..(slot + 1) * self.channels]
    }
}

/// A convolution repacked as `[tap][out][in]` with its lags.
struct PackedConv {
    w: Vec<f64>,
    bias: Vec<f64>,
    cin: usize,
    cout: usize,
    lags: Vec<usize>,
}

impl PackedConv {
    fn new(w: &Tensor, bias: Option<&Tensor>, dilation: usize) -> Self {
        let (cout, cin, taps) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let mut packed = vec![0.0; taps * cout * cin];
        for o in 0..cout {
            for i in 0..cin {
                for k in 0..taps {
                    packed[(k * cout + o) * cin + i] = w.at(&[o, i, k]);
                }
            }
        }
        PackedConv {
            w: packed,
            bias: bias.map_or_else(|| vec![0.0; cout], |b| b.data().to_vec()),
            cin,
            cout,
            lags: (0..taps).map(|k| (taps - 1 - k) * dilation).collect(),
        }
    }

    fn max_lag(&self) -> usize {
        self.lags.first().copied().unwrap_or(0)
    }

    /// `out = bias + Σ_k W_k · input(t − lag_k)`; `current` is lag 0.
    fn apply(&self, current: &[f64], history: &CircularBuffer, out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (k, &lag) in self.lags.iter().enumerate() {
            let x = if lag == 0 { current } else { history.get(lag) };
            let block = &self.w[k * self.cout * self.cin..(k + 1) * self.cout * self.cin];
            for (o, row) in block.chunks_exact(self.cin).enumerate() {
                out[o] += dot(row, x);
            }
        }
    }

    /// Pointwise (single-tap) application.
    fn apply_1x1(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in self.w.chunks_exact(self.cin).enumerate() {
            out[o] = self.bias[o] + dot(row, x);
        }
    }

    /// Same as `apply_1x1` but accumulating into `out`.
    fn accumulate_1x1(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in self.w.chunks_exact(self.cin).enumerate() {
            out[o] += self.bias[o] + dot(row, x);
        }
    }
}

struct CachedLayer {
    conv: PackedConv,
    cond: PackedConv,
    res: PackedConv,
    skip: PackedConv,
    history: CircularBuffer,
}

/// Per-sequence incremental state of the teacher.
struct CachedTeacher {
    input: PackedConv,
    input_history: CircularBuffer,
    layers: Vec<CachedLayer>,
    head1: PackedConv,
    head2: PackedConv,
    gate: usize,
    k: usize,
}

impl CachedTeacher {
    fn new(net: &TeacherNet) -> Result<Self> {
        let cfg = net.config();
        let p = net.params();
        let get = |name: &str| {
            p.get(name)
                .ok_or_else(|| Error::MissingParameter(name.to_string()))
        };
        let input = PackedConv::new(get("input.w")?, Some(get("input.b")?), 1);
        let input_history = CircularBuffer::new(input.max_lag(), 1);
        let mut layers = Vec::with_capacity(cfg.num_layers());
        for (i, &d) in cfg.dilations().iter().enumerate() {
            let conv = PackedConv::new(
                get(&layer_name(i, "conv.w"))?,
                Some(get(&layer_name(i, "conv.b"))?),
                d,
            );
            let history = CircularBuffer::new(conv.max_lag(), cfg.residual_channels);
            layers.push(CachedLayer {
                conv,
                cond: PackedConv::new(get(&layer_name(i, "cond.w"))?, None, 1),
                res: PackedConv::new(
                    get(&layer_name(i, "res.w"))?,
                    Some(get(&layer_name(i, "res.b"))?),
                    1,
                ),
                skip: PackedConv::new(
                    get(&layer_name(i, "skip.w"))?,
                    Some(get(&layer_name(i, "skip.b"))?),
                    1,
                ),
                history,
            });
        }
        Ok(CachedTeacher {
            input,
            input_history,
            layers,
            head1: PackedConv::new(get("head.w1")?, Some(get("head.b1")?), 1),
            head2: PackedConv::new(get("head.w2")?, Some(get("head.b2")?), 1),
            gate: cfg.gate_channels,
            k: cfg.num_mixtures,
        })
    }

    /// Conditioning projections of every layer for one frame.
    fn project_conditioning(&self, c: &[f64]) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| {
                let mut out = vec![0.0; l.cond.cout];
                l.cond.apply_1x1(c, &mut out);
                out
            })
            .collect()
    }

    /// Advances one step given the previous sample and returns the mixture
    /// for the current position.
    fn step(&mut self, prev_x: f64, cond_proj: &[Vec<f64>]) -> Result<MixtureOfLogistics> {
        let r = self.input.cout;
        let mut h = vec![0.0; r];
        self.input.apply(&[prev_x], &self.input_history, &mut h);
        self.input_history.push(&[prev_x]);

        let g = self.gate;
        let skip_ch = self.head1.cin;
        let mut skip = vec![0.0; skip_ch];
        let mut z = vec![0.0; 2 * g];
        let mut gated = vec![0.0; g];
        let mut res = vec![0.0; r];
        for (layer, proj) in self.layers.iter_mut().zip(cond_proj) {
            layer.conv.apply(&h, &layer.history, &mut z);
            layer.history.push(&h);
            for (zi, pi) in z.iter_mut().zip(proj) {
                *zi += pi;
            }
            for j in 0..g {
                gated[j] = z[j].tanh() * sigmoid(z[g + j]);
            }
            layer.res.apply_1x1(&gated, &mut res);
            for (hi, ri) in h.iter_mut().zip(&res) {
                *hi += ri;
            }
            layer.skip.accumulate_1x1(&gated, &mut skip);
        }
        for v in skip.iter_mut() {
            *v = v.max(0.0);
        }
        let mut hidden = vec![0.0; self.head1.cout];
        self.head1.apply_1x1(&skip, &mut hidden);
        for v in hidden.iter_mut() {
            *v = v.max(0.0);
        }
        let mut out = vec![0.0; self.head2.cout];
        self.head2.apply_1x1(&hidden, &mut out);
        let k = self.k;
        let log_ss = out[2 * k..3 * k].iter().map(|v| v.max(LOG_SCALE_MIN)).collect();
        MixtureOfLogistics::new(out[..k].to_vec(), out[k..2 * k].to_vec(), log_ss)
    }
}

fn check_request(net: &TeacherNet, c: &ConditioningSeq, t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("sampling needs T >= 1".into()));
    }
    if t > c.max_samples() {
        return Err(Error::InvalidArgument(format!(
            "conditioning covers {} samples, {t} requested",
            c.max_samples()
        )));
    }
    if c.channels() != net.config().conditioning_channels {
        return Err(Error::Config(format!(
            "conditioning has {} channels, teacher expects {}",
            c.channels(),
            net.config().conditioning_channels
        )));
    }
    Ok(())
}

/// Cached sequential generation of `T` samples for every conditioning row.
/// Two uniforms are drawn per sample, time-major across the batch.
pub fn ancestral_sample(
    net: &TeacherNet,
    c: &ConditioningSeq,
    t: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    check_request(net, c, t)?;
    let b = c.batch();
    let spec = net.config().discretization();
    let nf = c.num_frames();
    let cc = c.channels();
    let div = c.frame_rate_divisor();
    let mut states = Vec::with_capacity(b);
    let mut projections = Vec::with_capacity(b);
    for row in 0..b {
        let state = CachedTeacher::new(net)?;
        let used_frames = t.div_ceil(div).min(nf);
        let frames = c.frames();
        let per_frame: Vec<Vec<Vec<f64>>> = (0..used_frames)
            .map(|f| {
                let v: Vec<f64> = (0..cc).map(|ch| frames.at(&[row, ch, f])).collect();
                state.project_conditioning(&v)
            })
            .collect();
        states.push(state);
        projections.push(per_frame);
    }
    let mut out = vec![0.0; b * t];
    for step in 0..t {
        for row in 0..b {
            let prev = if step == 0 { 0.0 } else { out[row * t + step - 1] };
            let m = states[row].step(prev, &projections[row][step / div])?;
            out[row * t + step] = mol_sample(&m, rng, Some(&spec));
        }
    }
    Tensor::new(vec![b, 1, t], out)
}

/// Reference sampler that re-runs the full forward pass on the growing
/// prefix at every step. Quadratic in `T`.
pub fn ancestral_sample_naive(
    net: &TeacherNet,
    c: &ConditioningSeq,
    t: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    check_request(net, c, t)?;
    let b = c.batch();
    let spec = net.config().discretization();
    let mut x = Tensor::zeros(&[b, 1, t]);
    for step in 0..t {
        let prefix = x.narrow_last(0, step + 1);
        let params = net.teacher_forward(&prefix, c)?;
        for row in 0..b {
            let m = params.at(row, step);
            let v = mol_sample(&m, rng, Some(&spec));
            x.set(&[row, 0, step], v);
        }
    }
    Ok(x)
}
