//! Two small demonstrations: why the entropy term matters, and why a
//! feedforward generator needs a long receptive field.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::Graph;
use crate::distill::{cross_entropy_term, kl_loss, AnalyticTeacher};
use crate::error::{Error, Result};
use crate::harness::config::{FibDemoSettings, MapDemoSettings};
use crate::params::{Adam, Binding};
use crate::rng::RngStream;
use crate::student::{draw_latent, FlowConfig, FlowStack};
use crate::teacher::ConditioningSeq;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapObjective {
    /// Cross-entropy against the teacher only.
    CrossEntropy,
    /// Cross-entropy minus the student's entropy.
    Kl,
}

impl MapObjective {
    pub fn name(self) -> &'static str {
        match self {
            MapObjective::CrossEntropy => "ce",
            MapObjective::Kl => "kl",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapRun {
    pub objective: MapObjective,
    /// Per-timestep objective value at every step.
    pub losses: Vec<f64>,
    pub mean_log_s: f64,
    pub rms: f64,
}

/// Trains a student against white unit-logistic noise with the given
/// objective, then measures its samples.
pub fn train_map_student(settings: &MapDemoSettings, objective: MapObjective, seed: u64) -> Result<MapRun> {
    let cfg = FlowConfig {
        layers: settings.flow_layers.0.clone(),
        filter_size: 3,
        residual_channels: settings.channels,
        gate_channels: settings.channels,
        conditioning_channels: 1,
        dilation_cycle: 4,
    };
    let mut stack = FlowStack::new(cfg, &mut RngStream::derive(seed, "demo-map-init", 0))?;
    let (b, t) = (settings.batch, settings.length);
    let cond = ConditioningSeq::new(Tensor::zeros(&[b, 1, 1]), t)?;
    let cond_up = cond.upsample(t)?;
    let teacher = AnalyticTeacher::unit();
    let mut adam = Adam::new(settings.lr);
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let z = draw_latent(b, t, &mut RngStream::derive(seed, "demo-map-z", step as u64));
        let mut rng = RngStream::derive(seed, "demo-map-noise", step as u64);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let cv = g.constant(cond_up.clone());
        let vars = stack.generate(&mut g, zv, cv, Binding::Trainable)?;
        let total = match objective {
            MapObjective::CrossEntropy => cross_entropy_term(&mut g, &vars, &teacher, &cond, settings.inner_samples, &mut rng)?,
            MapObjective::Kl => kl_loss(&mut g, &vars, &teacher, &cond, settings.inner_samples, &mut rng)?.kl,
        };
        let loss = g.scale(total, 1.0 / t as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("{} objective {value}", objective.name()),
            });
        }
        losses.push(value);
        let grads = g.backward(loss)?.into_named();
        adam.update(stack.params_mut(), &grads);
    }

    let eval_b = 16;
    let z = draw_latent(eval_b, t, &mut RngStream::derive(seed, "demo-map-eval", 0));
    let eval_cond = ConditioningSeq::new(Tensor::zeros(&[eval_b, 1, 1]), t)?.upsample(t)?;
    let out = stack.generate_plain(&z, &eval_cond)?;
    let n = out.x.len() as f64;
    Ok(MapRun {
        objective,
        losses,
        mean_log_s: out.log_s_tot.sum() / n,
        rms: (out.x.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
    })
}

/// Both students from identical initialisations.
pub fn demo_map(settings: &MapDemoSettings, seed: u64) -> Result<[MapRun; 2]> {
    Ok([
        train_map_student(settings, MapObjective::CrossEntropy, seed)?,
        train_map_student(settings, MapObjective::Kl, seed)?,
    ])
}

/// Scaled Fibonacci-style sequences with random initial pairs, each divided
/// by its largest magnitude.
pub fn fibonacci_sequences(count: usize, length: usize, seed: u64, purpose: &str) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut rng = RngStream::derive(seed, purpose, i as u64);
            let mut x = vec![0.0; length];
            for v in x.iter_mut().take(2) {
                *v = 2.0 * rng.uniform_open() - 1.0;
            }
            for k in 2..length {
                x[k] = x[k - 1] + x[k - 2];
            }
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            x.iter().map(|v| v / peak).collect()
        })
        .collect()
}

/// Driving sequence of the recurrence, `z_k = x_k − x_{k−1} − x_{k−2}` with
/// zero history. Only the first two entries are non-zero; they are set
/// directly so rounding in `x` leaves no residue later on.
pub fn innovations(x: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; x.len()];
    if let Some(&x0) = x.first() {
        z[0] = x0;
    }
    if x.len() > 1 {
        z[1] = x[1] - x[0];
    }
    z
}

/// Least squares, optionally with every equation divided by the size of its
/// target. The terms of a scaled Fibonacci sequence span many orders of
/// magnitude, and only the small early ones separate the two lags.
fn least_squares(rows: &[Vec<f64>], targets: &[f64], equilibrate: bool) -> Result<Vec<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    let scale: Vec<f64> = targets
        .iter()
        .map(|y| if equilibrate { 1.0 / y.abs().max(f64::MIN_POSITIVE) } else { 1.0 })
        .collect();
    let a = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j] * scale[i]);
    let b = DVector::from_iterator(targets.len(), targets.iter().zip(&scale).map(|(y, s)| y * s));
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-300)
        .map_err(|e| Error::InvalidArgument(format!("least squares: {e}")))?;
    Ok(sol.iter().copied().collect())
}

/// `[v[k−1], v[k−2], …, v[k−width]]` (or from `v[k]` when `include_current`)
/// with zeros before the start.
fn window(v: &[f64], k: usize, width: usize, include_current: bool) -> Vec<f64> {
    let first = if include_current { 0 } else { 1 };
    (first..first + width)
        .map(|j| if j <= k { v[k - j] } else { 0.0 })
        .collect()
}

/// Held-out prediction error of a linear fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitError {
    pub max_abs: f64,
    pub rms: f64,
}

fn fit_error(w: &[f64], rows: &[Vec<f64>], targets: &[f64]) -> FitError {
    let mut max_abs = 0.0f64;
    let mut sq = 0.0;
    for (r, y) in rows.iter().zip(targets) {
        let e = r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - y;
        max_abs = max_abs.max(e.abs());
        sq += e * e;
    }
    FitError {
        max_abs,
        rms: (sq / rows.len().max(1) as f64).sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FibReport {
    /// Held-out error of the receptive-field-2 autoregressive fit.
    pub autoregressive: FitError,
    pub autoregressive_weights: Vec<f64>,
    /// `(receptive field, reconstruction error)` of feedforward fits over
    /// the training sequences' latent inputs.
    pub feedforward: Vec<(usize, FitError)>,
}

pub fn demo_fib(settings: &FibDemoSettings, seed: u64) -> Result<FibReport> {
    let n = settings.length;
    if n < 3 {
        return Err(Error::Config("demo_fib.length must be at least 3".into()));
    }
    let train = fibonacci_sequences(settings.train_sequences, n, seed, "demo-fib-train");
    let held = fibonacci_sequences(settings.heldout_sequences, n, seed, "demo-fib-heldout");

    let ar_rows = |seqs: &[Vec<f64>]| {
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for x in seqs {
            for k in 2..n {
                rows.push(window(x, k, 2, false));
                ys.push(x[k]);
            }
        }
        (rows, ys)
    };
    let (rows, ys) = ar_rows(&train);
    let ar = least_squares(&rows, &ys, true)?;
    let (hrows, hys) = ar_rows(&held);
    let autoregressive = fit_error(&ar, &hrows, &hys);

    let ff_rows = |seqs: &[Vec<f64>], r: usize| {
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for x in seqs {
            let z = innovations(x);
            for k in 0..n {
                rows.push(window(&z, k, r, true));
                ys.push(x[k]);
            }
        }
        (rows, ys)
    };
    let mut feedforward = Vec::new();
    for &r in &settings.receptive_fields.0 {
        let (rows, ys) = ff_rows(&train, r);
        let w = least_squares(&rows, &ys, false)?;
        feedforward.push((r, fit_error(&w, &rows, &ys)));
    }
    Ok(FibReport {
        autoregressive,
        autoregressive_weights: ar,
        feedforward,
    })
}
