//! The parallel student: a stack of unshared inverse autoregressive flows.
//!
//! Flow `i` reads the previous flow's output `x^{i−1}` (delayed by one step)
//! together with the conditioning and emits a location `μ^i` and log-scale
//! `ln s^i` for every position; `x^i = x^{i−1} · s^i + μ^i`. Starting from
//! logistic noise `z = x^0`, the composed output is a single logistic per
//! timestep with location `mu_tot` and scale `s_tot`.

mod plain;

pub use plain::ParallelOptions;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_normal, Binding, Params};
use crate::rng::RngStream;
use crate::teacher::{gated_activation, ConditioningSeq};
use crate::tensor::Tensor;

/// Bound applied to every flow's log-scale.
pub const FLOW_LOG_SCALE_BOUND: f64 = 7.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Residual layers in each flow, first to last.
    pub layers: Vec<usize>,
    pub filter_size: usize,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub conditioning_channels: usize,
    /// Dilation doubles from 1 and restarts after this many layers.
    pub dilation_cycle: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: vec![4, 4, 4, 8],
            filter_size: 3,
            residual_channels: 64,
            gate_channels: 64,
            conditioning_channels: 9,
            dilation_cycle: 10,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("student needs at least one flow".into()));
        }
        if self.layers.iter().any(|&l| l == 0) {
            return Err(Error::Config("every flow needs at least one layer".into()));
        }
        let sizes = [
            ("filter_size", self.filter_size),
            ("residual_channels", self.residual_channels),
            ("gate_channels", self.gate_channels),
            ("dilation_cycle", self.dilation_cycle),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("student.{name} must be positive")));
            }
        }
        if self.dilation_cycle > 20 {
            return Err(Error::Config("student.dilation_cycle must be <= 20".into()));
        }
        Ok(())
    }

    pub fn num_flows(&self) -> usize {
        self.layers.len()
    }

    pub fn dilations(&self, flow: usize) -> Vec<usize> {
        (0..self.layers[flow])
            .map(|j| 1 << (j % self.dilation_cycle))
            .collect()
    }

    /// Number of past inputs one flow's `(μ, s)` at `t` can see.
    pub fn flow_receptive_field(&self, flow: usize) -> usize {
        1 + self
            .dilations(flow)
            .iter()
            .map(|d| (self.filter_size - 1) * d)
            .sum::<usize>()
    }

    /// How far back in `z` the composed output at `t` can reach.
    pub fn total_receptive_field(&self) -> usize {
        (0..self.num_flows()).map(|i| self.flow_receptive_field(i)).sum()
    }
}

pub(crate) fn flow_param(flow: usize, part: &str) -> String {
    format!("flow{flow}.{part}")
}

pub(crate) fn flow_layer_param(flow: usize, layer: usize, part: &str) -> String {
    format!("flow{flow}.layer{layer:02}.{part}")
}

/// Per-flow and composed parameters on the tape, each `[B, 1, T]`.
#[derive(Clone, Debug)]
pub struct StudentVars {
    pub x: Var,
    pub mu_tot: Var,
    pub log_s_tot: Var,
    /// `(μ^i, ln s^i)` for every flow.
    pub per_flow: Vec<(Var, Var)>,
}

/// Values of one generation pass, each `[B, 1, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutput {
    pub x: Tensor,
    pub mu_tot: Tensor,
    pub log_s_tot: Tensor,
    /// `(μ^i, ln s^i)` for every flow.
    pub per_flow: Vec<(Tensor, Tensor)>,
}

impl StudentOutput {
    pub fn from_graph(g: &Graph, v: &StudentVars) -> Self {
        StudentOutput {
            x: g.value(v.x).clone(),
            mu_tot: g.value(v.mu_tot).clone(),
            log_s_tot: g.value(v.log_s_tot).clone(),
            per_flow: v
                .per_flow
                .iter()
                .map(|&(m, s)| (g.value(m).clone(), g.value(s).clone()))
                .collect(),
        }
    }

    pub fn s_tot(&self) -> Tensor {
        self.log_s_tot.map(f64::exp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    config: FlowConfig,
    params: Params,
}

impl FlowStack {
    /// Random residual layers with a zero output head, so every flow starts
    /// as the identity.
    pub fn new(config: FlowConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let params = Self::init_params(&config, rng);
        Ok(FlowStack { config, params })
    }

    pub fn from_params(config: FlowConfig, params: Params) -> Result<Self> {
        config.validate()?;
        Self::init_params(&config, &mut RngStream::new(0, 0)).check_layout(&params)?;
        Ok(FlowStack { config, params })
    }

    fn init_params(c: &FlowConfig, rng: &mut RngStream) -> Params {
        let (r, gch, f, cc) = (
            c.residual_channels,
            c.gate_channels,
            c.filter_size,
            c.conditioning_channels,
        );
        let mut p = Params::new();
        for (i, &layers) in c.layers.iter().enumerate() {
            p.insert(flow_param(i, "input.w"), init_normal(&[r, 1, 1], 1, 1.0, rng));
            p.insert(flow_param(i, "input.b"), Tensor::zeros(&[r]));
            for j in 0..layers {
                p.insert(
                    flow_layer_param(i, j, "conv.w"),
                    init_normal(&[2 * gch, r, f], r * f, 1.0, rng),
                );
                p.insert(flow_layer_param(i, j, "conv.b"), Tensor::zeros(&[2 * gch]));
                p.insert(
                    flow_layer_param(i, j, "cond.w"),
                    init_normal(&[2 * gch, cc, 1], cc.max(1), 1.0, rng),
                );
                p.insert(
                    flow_layer_param(i, j, "res.w"),
                    init_normal(&[r, gch, 1], gch, 0.5, rng),
                );
                p.insert(flow_layer_param(i, j, "res.b"), Tensor::zeros(&[r]));
            }
            p.insert(flow_param(i, "out.w"), Tensor::zeros(&[2, r, 1]));
            p.insert(flow_param(i, "out.b"), Tensor::zeros(&[2]));
        }
        p
    }

    pub fn config(&self) -> &FlowConfig {
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

    /// Applies flow `flow` to `x_prev` (`[B, 1, T]`) with upsampled
    /// conditioning, returning `(x^i, μ^i, ln s^i)`.
    pub fn flow_apply(
        &self,
        g: &mut Graph,
        flow: usize,
        x_prev: Var,
        cond: Var,
        binding: Binding,
    ) -> Result<(Var, Var, Var)> {
        if flow >= self.config.num_flows() {
            return Err(Error::InvalidArgument(format!(
                "flow index {flow} out of range for {} flows",
                self.config.num_flows()
            )));
        }
        if !g.value(x_prev).is_finite() {
            return Err(Error::FlowNonFinite { flow });
        }
        let xs = g.shape(x_prev);
        if xs.len() != 3 || xs[1] != 1 || g.shape(cond)[2] != xs[2] {
            return Err(Error::ShapeMismatch {
                op: "flow_apply",
                left: xs.to_vec(),
                right: g.shape(cond).to_vec(),
            });
        }
        let p = &self.params;
        let shifted = g.shift_right(x_prev, 1)?;
        let iw = p.bind(g, &flow_param(flow, "input.w"), binding)?;
        let ib = p.bind(g, &flow_param(flow, "input.b"), binding)?;
        let mut h = g.causal_conv1d(shifted, iw, Some(ib), 1)?;
        for (j, d) in self.config.dilations(flow).into_iter().enumerate() {
            let w = p.bind(g, &flow_layer_param(flow, j, "conv.w"), binding)?;
            let b = p.bind(g, &flow_layer_param(flow, j, "conv.b"), binding)?;
            let v = p.bind(g, &flow_layer_param(flow, j, "cond.w"), binding)?;
            let zx = g.causal_conv1d(h, w, Some(b), d)?;
            let zc = g.causal_conv1d(cond, v, None, 1)?;
            let z = g.add(zx, zc)?;
            let gated = gated_activation(g, z, self.config.gate_channels)?;
            let rw = p.bind(g, &flow_layer_param(flow, j, "res.w"), binding)?;
            let rb = p.bind(g, &flow_layer_param(flow, j, "res.b"), binding)?;
            let r = g.causal_conv1d(gated, rw, Some(rb), 1)?;
            h = g.add(h, r)?;
        }
        let ow = p.bind(g, &flow_param(flow, "out.w"), binding)?;
        let ob = p.bind(g, &flow_param(flow, "out.b"), binding)?;
        let out = g.causal_conv1d(h, ow, Some(ob), 1)?;
        let mu = g.slice(out, 1, 0, 1)?;
        let raw = g.slice(out, 1, 1, 1)?;
        let log_s = g.clamp(raw, -FLOW_LOG_SCALE_BOUND, FLOW_LOG_SCALE_BOUND);
        let s = g.exp(log_s);
        let scaled = g.mul(x_prev, s)?;
        let x = g.add(scaled, mu)?;
        if !g.value(x).is_finite() || !g.value(mu).is_finite() {
            return Err(Error::FlowNonFinite { flow });
        }
        Ok((x, mu, log_s))
    }

    /// All flows in one pass each; `cond` is upsampled to `T`.
    pub fn generate(&self, g: &mut Graph, z: Var, cond: Var, binding: Binding) -> Result<StudentVars> {
        let mut x = z;
        let mut per_flow = Vec::with_capacity(self.config.num_flows());
        for i in 0..self.config.num_flows() {
            let (xi, mu, log_s) = self.flow_apply(g, i, x, cond, binding)?;
            per_flow.push((mu, log_s));
            x = xi;
        }
        let (mu_tot, log_s_tot) = compose_on_tape(g, &per_flow)?;
        Ok(StudentVars {
            x,
            mu_tot,
            log_s_tot,
            per_flow,
        })
    }
}

/// `mu_tot ← mu_tot · s^i + μ^i`, `ln s_tot ← ln s_tot + ln s^i`, on the tape.
fn compose_on_tape(g: &mut Graph, per_flow: &[(Var, Var)]) -> Result<(Var, Var)> {
    let (mut mu_tot, mut log_s_tot) = per_flow[0];
    for &(mu, log_s) in &per_flow[1..] {
        let s = g.exp(log_s);
        let scaled = g.mul(mu_tot, s)?;
        mu_tot = g.add(scaled, mu)?;
        log_s_tot = g.add(log_s_tot, log_s)?;
    }
    Ok((mu_tot, log_s_tot))
}

/// Composes per-flow `(μ^i, s^i)` into `(mu_tot, s_tot)`:
/// `s_tot = Π s^i`, `mu_tot = Σ_i μ^i Π_{j>i} s^j`.
pub fn compose_params(per_flow: &[(Tensor, Tensor)]) -> Result<(Tensor, Tensor)> {
    let (first_mu, first_s) = per_flow
        .first()
        .ok_or_else(|| Error::InvalidArgument("compose_params needs at least one flow".into()))?;
    let mut mu_tot = first_mu.clone();
    let mut s_tot = first_s.clone();
    for (mu, s) in per_flow {
        if mu.shape() != first_mu.shape() || s.shape() != first_mu.shape() {
            return Err(Error::ShapeMismatch {
                op: "compose_params",
                left: first_mu.shape().to_vec(),
                right: mu.shape().to_vec(),
            });
        }
        if let Some(bad) = s.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "flow scales must be positive, got {bad}"
            )));
        }
    }
    for (mu, s) in &per_flow[1..] {
        for ((m, st), (&mi, &si)) in mu_tot
            .data_mut()
            .iter_mut()
            .zip(s_tot.data_mut())
            .zip(mu.data().iter().zip(s.data()))
        {
            *m = *m * si + mi;
            *st *= si;
        }
    }
    Ok((mu_tot, s_tot))
}

/// I.i.d. standard logistic noise `[B, 1, T]`.
pub fn draw_latent(b: usize, t: usize, rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(&[b, 1, t], |_| rng.logistic())
}

/// Parallel generation with a throwaway tape.
pub fn student_generate(stack: &FlowStack, z: &Tensor, c: &ConditioningSeq) -> Result<StudentOutput> {
    let t = *z.shape().last().unwrap_or(&0);
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let cv = g.constant(c.upsample(t)?);
    let vars = stack.generate(&mut g, zv, cv, Binding::Frozen)?;
    Ok(StudentOutput::from_graph(&g, &vars))
}

/// Closed-form student entropy `mean_b Σ_t ln s_tot + 2T`.
pub fn student_entropy_term(g: &mut Graph, log_s_tot: Var) -> Var {
    let shape = g.shape(log_s_tot).to_vec();
    let b = shape[0] as f64;
    let t = *shape.last().unwrap() as f64;
    let total = g.sum(log_s_tot);
    let per_row = g.scale(total, 1.0 / b);
    g.add_scalar(per_row, 2.0 * t)
}

/// [`student_entropy_term`] on plain values of `s_tot`.
pub fn student_entropy(s_tot: &Tensor) -> f64 {
    let b = s_tot.shape()[0] as f64;
    let t = *s_tot.shape().last().unwrap() as f64;
    s_tot.data().iter().map(|s| s.ln()).sum::<f64>() / b + 2.0 * t
}

impl FlowStack {
    /// Timestep-by-timestep evaluation: each flow's `(μ, s)` at `t` is
    /// recomputed from the already generated prefix. Quadratic in `T`.
    pub fn generate_sequential(&self, z: &Tensor, c: &ConditioningSeq) -> Result<Tensor> {
        let (b, t) = (z.shape()[0], z.shape()[2]);
        let cond = c.upsample(t)?;
        let mut xs: Vec<Tensor> = (0..=self.config.num_flows())
            .map(|_| Tensor::zeros(&[b, 1, t]))
            .collect();
        for step in 0..t {
            for row in 0..b {
                xs[0].set(&[row, 0, step], z.at(&[row, 0, step]));
            }
            let cond_prefix = cond.narrow_last(0, step + 1);
            for i in 0..self.config.num_flows() {
                let prefix = xs[i].narrow_last(0, step + 1);
                let (mu, log_s) = self.flow_params_plain(i, &prefix, &cond_prefix)?;
                for row in 0..b {
                    let s = log_s[row * (step + 1) + step].exp();
                    let v = xs[i].at(&[row, 0, step]) * s + mu[row * (step + 1) + step];
                    xs[i + 1].set(&[row, 0, step], v);
                }
            }
        }
        Ok(xs.pop().unwrap())
    }

    /// Inverts the stack: recovers `z` from a generated `x`, one flow and
    /// one timestep at a time.
    pub fn recover_latent(&self, x: &Tensor, c: &ConditioningSeq) -> Result<Tensor> {
        let (b, t) = (x.shape()[0], x.shape()[2]);
        let cond = c.upsample(t)?;
        let mut current = x.clone();
        for i in (0..self.config.num_flows()).rev() {
            let mut prev = Tensor::zeros(&[b, 1, t]);
            for step in 0..t {
                let prefix = prev.narrow_last(0, step + 1);
                let (mu, log_s) =
                    self.flow_params_plain(i, &prefix, &cond.narrow_last(0, step + 1))?;
                for row in 0..b {
                    let k = row * (step + 1) + step;
                    let v = (current.at(&[row, 0, step]) - mu[k]) * (-log_s[k]).exp();
                    prev.set(&[row, 0, step], v);
                }
            }
            current = prev;
        }
        Ok(current)
    }
}
