//! The autoregressive teacher: gated, dilated, causal residual stacks with a
//! discretised mixture-of-logistics output head.

mod conditioning;
pub mod sampler;

pub use conditioning::ConditioningSeq;
pub use sampler::{ancestral_sample, ancestral_sample_naive, CircularBuffer};

use crate::autodiff::{Graph, Var};
use crate::distributions::{self, DiscretizationSpec, MixtureOfLogistics, LOG_SCALE_MIN};
use crate::error::{Error, Result};
use crate::params::{init_normal, Binding, Params};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub num_stacks: usize,
    pub layers_per_stack: usize,
    pub filter_size: usize,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    pub num_mixtures: usize,
    pub conditioning_channels: usize,
    pub bit_depth: u32,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            num_stacks: 2,
            layers_per_stack: 6,
            filter_size: 3,
            residual_channels: 64,
            gate_channels: 64,
            skip_channels: 64,
            num_mixtures: 10,
            conditioning_channels: 9,
            bit_depth: 8,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_stacks", self.num_stacks),
            ("layers_per_stack", self.layers_per_stack),
            ("filter_size", self.filter_size),
            ("residual_channels", self.residual_channels),
            ("gate_channels", self.gate_channels),
            ("skip_channels", self.skip_channels),
            ("num_mixtures", self.num_mixtures),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("teacher.{name} must be positive")));
            }
        }
        if self.layers_per_stack > 20 {
            return Err(Error::Config("teacher.layers_per_stack must be <= 20".into()));
        }
        DiscretizationSpec::new(self.bit_depth)?;
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.num_stacks * self.layers_per_stack
    }

    /// Dilation of every residual layer: doubling from 1 within each stack.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.num_layers())
            .map(|i| 1 << (i % self.layers_per_stack))
            .collect()
    }

    /// `1 + stacks · (F − 1) · (2^layers − 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + self.num_stacks * (self.filter_size - 1) * ((1 << self.layers_per_stack) - 1)
    }

    pub fn discretization(&self) -> DiscretizationSpec {
        DiscretizationSpec {
            bit_depth: self.bit_depth,
        }
    }
}

/// Closed-form receptive field of the residual stacks.
pub fn receptive_field(config: &TeacherConfig) -> usize {
    config.receptive_field()
}

/// Mixture parameters on the tape, each `[B, K, T]`.
#[derive(Clone, Copy, Debug)]
pub struct MolVars {
    pub logits: Var,
    pub mus: Var,
    pub log_ss: Var,
}

/// Mixture parameter values, each `[B, K, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MolParams {
    pub logits: Tensor,
    pub mus: Tensor,
    pub log_ss: Tensor,
}

impl MolParams {
    pub fn from_graph(g: &Graph, v: MolVars) -> Self {
        MolParams {
            logits: g.value(v.logits).clone(),
            mus: g.value(v.mus).clone(),
            log_ss: g.value(v.log_ss).clone(),
        }
    }

    pub fn time_len(&self) -> usize {
        self.logits.shape()[2]
    }

    /// The mixture for batch row `b` at time `t`.
    pub fn at(&self, b: usize, t: usize) -> MixtureOfLogistics {
        let k = self.logits.shape()[1];
        let pick = |x: &Tensor| (0..k).map(|i| x.at(&[b, i, t])).collect::<Vec<_>>();
        MixtureOfLogistics::new(pick(&self.logits), pick(&self.mus), pick(&self.log_ss))
            .expect("teacher produced an invalid mixture")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherNet {
    config: TeacherConfig,
    params: Params,
}

pub(crate) fn layer_name(i: usize, part: &str) -> String {
    format!("layer{i:02}.{part}")
}

impl TeacherNet {
    pub fn new(config: TeacherConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let params = Self::init_params(&config, rng);
        Ok(TeacherNet { config, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: TeacherConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let reference = Self::init_params(&config, &mut RngStream::new(0, 0));
        reference.check_layout(&params)?;
        Ok(TeacherNet { config, params })
    }

    fn init_params(c: &TeacherConfig, rng: &mut RngStream) -> Params {
        let (r, gch, s, f, k) = (
            c.residual_channels,
            c.gate_channels,
            c.skip_channels,
            c.filter_size,
            c.num_mixtures,
        );
        let cc = c.conditioning_channels;
        let mut p = Params::new();
        p.insert("input.w", init_normal(&[r, 1, 1], 1, 1.0, rng));
        p.insert("input.b", Tensor::zeros(&[r]));
        for i in 0..c.num_layers() {
            p.insert(
                layer_name(i, "conv.w"),
                init_normal(&[2 * gch, r, f], r * f, 1.0, rng),
            );
            p.insert(layer_name(i, "conv.b"), Tensor::zeros(&[2 * gch]));
            p.insert(
                layer_name(i, "cond.w"),
                init_normal(&[2 * gch, cc, 1], cc.max(1), 1.0, rng),
            );
            p.insert(layer_name(i, "res.w"), init_normal(&[r, gch, 1], gch, 0.5, rng));
            p.insert(layer_name(i, "res.b"), Tensor::zeros(&[r]));
            p.insert(layer_name(i, "skip.w"), init_normal(&[s, gch, 1], gch, 1.0, rng));
            p.insert(layer_name(i, "skip.b"), Tensor::zeros(&[s]));
        }
        p.insert("head.w1", init_normal(&[s, s, 1], s, 1.0, rng));
        p.insert("head.b1", Tensor::zeros(&[s]));
        p.insert("head.w2", init_normal(&[3 * k, s, 1], s, 0.1, rng));
        // Start as a broad, evenly spread mixture.
        let b2 = Tensor::from_fn(&[3 * k], |i| match i / k {
            0 => 0.0,
            1 => -0.9 + 1.8 * ((i % k) as f64 + 0.5) / k as f64,
            _ => -2.0,
        });
        p.insert("head.b2", b2);
        p
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// One gated residual layer:
    /// `h = tanh(W_f∗x + V_f∗c) ⊙ σ(W_g∗x + V_g∗c)`, returning
    /// `(x + 1×1(h), 1×1(h))`.
    pub fn gated_residual_layer(
        &self,
        g: &mut Graph,
        x: Var,
        cond: Var,
        layer: usize,
        binding: Binding,
    ) -> Result<(Var, Var)> {
        if g.shape(x)[2] != g.shape(cond)[2] {
            return Err(Error::ShapeMismatch {
                op: "gated_residual_layer (time)",
                left: g.shape(x).to_vec(),
                right: g.shape(cond).to_vec(),
            });
        }
        let dilation = self.config.dilations()[layer];
        let p = &self.params;
        let w = p.bind(g, &layer_name(layer, "conv.w"), binding)?;
        let b = p.bind(g, &layer_name(layer, "conv.b"), binding)?;
        let v = p.bind(g, &layer_name(layer, "cond.w"), binding)?;
        let zx = g.causal_conv1d(x, w, Some(b), dilation)?;
        let zc = g.causal_conv1d(cond, v, None, 1)?;
        let z = g.add(zx, zc)?;
        let h = gated_activation(g, z, self.config.gate_channels)?;
        let rw = p.bind(g, &layer_name(layer, "res.w"), binding)?;
        let rb = p.bind(g, &layer_name(layer, "res.b"), binding)?;
        let sw = p.bind(g, &layer_name(layer, "skip.w"), binding)?;
        let sb = p.bind(g, &layer_name(layer, "skip.b"), binding)?;
        let r = g.causal_conv1d(h, rw, Some(rb), 1)?;
        let residual = g.add(x, r)?;
        let skip = g.causal_conv1d(h, sw, Some(sb), 1)?;
        Ok((residual, skip))
    }

    /// Mixture parameters for every position. The input is delayed by one
    /// step first, so the output at `t` sees `x_<t` and conditioning `≤ t`.
    /// `cond` must already be upsampled to the waveform length.
    pub fn forward(&self, g: &mut Graph, x: Var, cond: Var, binding: Binding) -> Result<MolVars> {
        let xs = g.value(x);
        if xs.rank() != 3 || xs.shape()[1] != 1 {
            return Err(Error::InvalidShape {
                op: "teacher_forward",
                shape: xs.shape().to_vec(),
                reason: "expected [B, 1, T]".into(),
            });
        }
        if let Some((i, &v)) = xs
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(Error::OutOfDomain { index: i, value: v });
        }
        let cshape = g.shape(cond);
        if cshape.len() != 3
            || cshape[1] != self.config.conditioning_channels
            || cshape[0] != xs.shape()[0]
        {
            return Err(Error::ShapeMismatch {
                op: "teacher_forward (conditioning)",
                left: xs.shape().to_vec(),
                right: cshape.to_vec(),
            });
        }
        let p = &self.params;
        let shifted = g.shift_right(x, 1)?;
        let iw = p.bind(g, "input.w", binding)?;
        let ib = p.bind(g, "input.b", binding)?;
        let mut h = g.causal_conv1d(shifted, iw, Some(ib), 1)?;
        let mut skip_sum: Option<Var> = None;
        for layer in 0..self.config.num_layers() {
            let (res, skip) = self.gated_residual_layer(g, h, cond, layer, binding)?;
            h = res;
            skip_sum = Some(match skip_sum {
                None => skip,
                Some(acc) => g.add(acc, skip)?,
            });
        }
        let skip_sum = skip_sum.expect("at least one layer");
        let a = g.relu(skip_sum);
        let w1 = p.bind(g, "head.w1", binding)?;
        let b1 = p.bind(g, "head.b1", binding)?;
        let hidden = g.causal_conv1d(a, w1, Some(b1), 1)?;
        let hidden = g.relu(hidden);
        let w2 = p.bind(g, "head.w2", binding)?;
        let b2 = p.bind(g, "head.b2", binding)?;
        let out = g.causal_conv1d(hidden, w2, Some(b2), 1)?;
        let k = self.config.num_mixtures;
        let logits = g.slice(out, 1, 0, k)?;
        let mus = g.slice(out, 1, k, k)?;
        let raw_log_s = g.slice(out, 1, 2 * k, k)?;
        let log_ss = g.clamp(raw_log_s, LOG_SCALE_MIN, f64::INFINITY);
        Ok(MolVars {
            logits,
            mus,
            log_ss,
        })
    }

    /// Tape-free [`TeacherNet::forward`] on a waveform `[B, 1, T]`.
    pub fn teacher_forward(&self, x: &Tensor, c: &ConditioningSeq) -> Result<MolParams> {
        let t = *x.shape().last().unwrap_or(&0);
        if t == 0 {
            return Err(Error::InvalidArgument("teacher_forward needs T >= 1".into()));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let cv = g.constant(c.upsample(t)?);
        let mv = self.forward(&mut g, xv, cv, Binding::Frozen)?;
        Ok(MolParams::from_graph(&g, mv))
    }

    /// Per-position discretised log-probabilities `[B, 1, T]` of a
    /// quantised waveform.
    pub fn log_prob(
        &self,
        g: &mut Graph,
        x: &Tensor,
        cond: &ConditioningSeq,
        binding: Binding,
    ) -> Result<Var> {
        let t = x.shape()[2];
        let xv = g.constant(x.clone());
        let cv = g.constant(cond.upsample(t)?);
        let mv = self.forward(g, xv, cv, binding)?;
        distributions::tape::discretized_mol_log_prob(
            g,
            x,
            mv.logits,
            mv.mus,
            mv.log_ss,
            &self.config.discretization(),
        )
    }

    /// Mean negative log-likelihood per timestep (nats) over batch and time.
    pub fn nll(
        &self,
        g: &mut Graph,
        x: &Tensor,
        cond: &ConditioningSeq,
        binding: Binding,
    ) -> Result<Var> {
        let lp = self.log_prob(g, x, cond, binding)?;
        let m = g.mean(lp);
        Ok(g.neg(m))
    }

    /// NLL per timestep for each batch row.
    pub fn nll_per_row(&self, x: &Tensor, cond: &ConditioningSeq) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let lp = self.log_prob(&mut g, x, cond, Binding::Frozen)?;
        let v = g.value(lp);
        let t = v.shape()[2];
        Ok(v.data().chunks(t).map(|row| -row.iter().sum::<f64>() / t as f64).collect())
    }
}

/// `tanh(first half) ⊙ σ(second half)` along the channel axis.
pub(crate) fn gated_activation(g: &mut Graph, z: Var, half: usize) -> Result<Var> {
    let f = g.slice(z, 1, 0, half)?;
    let gate = g.slice(z, 1, half, half)?;
    let tf = g.tanh(f);
    let sg = g.sigmoid(gate);
    g.mul(tf, sg)
}
