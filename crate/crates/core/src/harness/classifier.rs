//! Toy frame-level phone classifier used for the perceptual loss.

use crate::autodiff::{Graph, Var};
use crate::distributions::tape::log_softmax;
use crate::error::{Error, Result};
use crate::harness::corpus::{Batch, Corpus};
use crate::params::{init_normal, Adam, Binding, Params};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Accuracy below which a classifier is refused.
pub const MIN_ACCURACY: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub filter_size: usize,
    pub num_phones: usize,
    pub frame_rate_divisor: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            channels: 16,
            dilations: vec![1, 2, 4, 8, 16],
            filter_size: 3,
            num_phones: 6,
            frame_rate_divisor: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhoneClassifier {
    config: ClassifierConfig,
    params: Params,
    /// Held-out frame accuracy once trained.
    accuracy: Option<f64>,
}

fn layer(i: usize, part: &str) -> String {
    format!("cls.layer{i}.{part}")
}

impl PhoneClassifier {
    pub fn new(config: ClassifierConfig, rng: &mut RngStream) -> Result<Self> {
        if config.dilations.is_empty() || config.channels == 0 || config.num_phones < 2 {
            return Err(Error::Config("classifier needs layers, channels and >= 2 phones".into()));
        }
        let params = Self::init_params(&config, rng);
        Ok(PhoneClassifier {
            config,
            params,
            accuracy: None,
        })
    }

    pub fn from_params(config: ClassifierConfig, params: Params, accuracy: Option<f64>) -> Result<Self> {
        Self::init_params(&config, &mut RngStream::new(0, 0)).check_layout(&params)?;
        Ok(PhoneClassifier {
            config,
            params,
            accuracy,
        })
    }

    fn init_params(c: &ClassifierConfig, rng: &mut RngStream) -> Params {
        let (ch, f) = (c.channels, c.filter_size);
        let mut p = Params::new();
        p.insert("cls.input.w", init_normal(&[ch, 1, f], f, 4.0, rng));
        p.insert("cls.input.b", Tensor::zeros(&[ch]));
        for i in 0..c.dilations.len() {
            p.insert(layer(i, "w"), init_normal(&[ch, ch, f], ch * f, 1.0, rng));
            p.insert(layer(i, "b"), Tensor::zeros(&[ch]));
        }
        p.insert("cls.out.w", init_normal(&[c.num_phones, ch, 1], ch, 1.0, rng));
        p.insert("cls.out.b", Tensor::zeros(&[c.num_phones]));
        p
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.accuracy
    }

    /// Causal feature maps `[B, C, T]` of every layer.
    pub fn features(&self, g: &mut Graph, x: Var, binding: Binding) -> Result<Vec<Var>> {
        let p = &self.params;
        let w = p.bind(g, "cls.input.w", binding)?;
        let b = p.bind(g, "cls.input.b", binding)?;
        let pre = g.causal_conv1d(x, w, Some(b), 1)?;
        let mut h = g.relu(pre);
        let mut out = vec![h];
        for (i, &d) in self.config.dilations.iter().enumerate() {
            let w = p.bind(g, &layer(i, "w"), binding)?;
            let b = p.bind(g, &layer(i, "b"), binding)?;
            let pre = g.causal_conv1d(h, w, Some(b), d)?;
            let act = g.relu(pre);
            h = g.add(h, act)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Samples before which some feature positions still see the zero padding.
    pub fn warmup(&self) -> usize {
        (self.config.filter_size - 1) * (1 + self.config.dilations.iter().sum::<usize>())
    }

    /// Frame logits `[B, P, frames]` from features averaged over each frame.
    pub fn frame_logits(&self, g: &mut Graph, x: Var, binding: Binding) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, t) = (shape[0], shape[2]);
        let div = self.config.frame_rate_divisor;
        if t % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "classifier input length {t} is not a multiple of {div}"
            )));
        }
        let feats = self.features(g, x, binding)?;
        let last = *feats.last().unwrap();
        let ch = self.config.channels;
        let grouped = g.reshape(last, &[b, ch, t / div, div])?;
        let pooled = g.sum_axis(grouped, 3)?;
        let pooled = g.scale(pooled, 1.0 / div as f64);
        let pooled = g.reshape(pooled, &[b, ch, t / div])?;
        let w = self.params.bind(g, "cls.out.w", binding)?;
        let bias = self.params.bind(g, "cls.out.b", binding)?;
        g.causal_conv1d(pooled, w, Some(bias), 1)
    }

    /// Mean frame cross-entropy against `phones` (`[B, frames]` row-major).
    pub fn loss(&self, g: &mut Graph, batch: &Batch, binding: Binding) -> Result<Var> {
        let x = g.constant(batch.wave.clone());
        let logits = self.frame_logits(g, x, binding)?;
        let shape = g.shape(logits).to_vec();
        let (b, nf) = (shape[0], shape[2]);
        let mut mask = Tensor::zeros(&shape);
        for row in 0..b {
            for f in 0..nf {
                mask.set(&[row, batch.phones[row * nf + f], f], 1.0);
            }
        }
        let logp = log_softmax(g, logits, 1)?;
        let m = g.constant(mask);
        let picked = g.mul(logp, m)?;
        let s = g.sum(picked);
        Ok(g.scale(s, -1.0 / (b * nf) as f64))
    }

    /// Predicted phone per frame, row-major.
    pub fn predict(&self, wave: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.constant(wave.clone());
        let logits = self.frame_logits(&mut g, x, Binding::Frozen)?;
        let v = g.value(logits);
        let (b, p, nf) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = Vec::with_capacity(b * nf);
        for row in 0..b {
            for f in 0..nf {
                let best = (0..p)
                    .max_by(|&i, &j| v.at(&[row, i, f]).total_cmp(&v.at(&[row, j, f])))
                    .unwrap();
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Frame accuracy on a batch.
    pub fn evaluate(&self, batch: &Batch) -> Result<f64> {
        let pred = self.predict(&batch.wave)?;
        let hits = pred.iter().zip(&batch.phones).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / pred.len() as f64)
    }

    /// Errors unless the classifier was trained to a usable accuracy.
    pub fn ensure_trained(&self) -> Result<()> {
        match self.accuracy {
            None => Err(Error::UntrainedClassifier),
            Some(a) if a < MIN_ACCURACY => Err(Error::ClassifierTooWeak {
                accuracy: a,
                floor: MIN_ACCURACY,
            }),
            Some(_) => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTraining {
    pub steps: usize,
    pub batch: usize,
    pub crop_frames: usize,
    pub lr: f64,
    pub held_out: usize,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            steps: 1000,
            batch: 8,
            crop_frames: 8,
            lr: 1e-2,
            held_out: 8,
            seed: 0,
        }
    }
}

/// Trains on the corpus' training clips and scores whole held-out clips.
/// Returns the per-step losses alongside the classifier.
pub fn train_classifier(
    corpus: &Corpus,
    config: ClassifierConfig,
    opts: &ClassifierTraining,
) -> Result<(PhoneClassifier, Vec<f64>)> {
    let mut cls = PhoneClassifier::new(config, &mut RngStream::derive(opts.seed, "classifier-init", 0))?;
    let (train, held) = corpus.split(opts.held_out);
    if train.is_empty() || held.is_empty() {
        return Err(Error::Config("classifier needs training and held-out clips".into()));
    }
    let mut adam = Adam::new(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut rng = RngStream::derive(opts.seed, "classifier-batch", step as u64);
        let batch = corpus.random_batch(&train, opts.batch, opts.crop_frames, None, &mut rng)?;
        let mut g = Graph::new();
        let l = cls.loss(&mut g, &batch, Binding::Trainable)?;
        let value = g.value(l).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("classifier loss {value}"),
            });
        }
        losses.push(value);
        let grads = g.backward(l)?.into_named();
        adam.update(&mut cls.params, &grads);
    }
    let frames = corpus.spec.frames_per_clip();
    let eval = corpus.batch(&held, &vec![0; held.len()], frames, None)?;
    let acc = cls.evaluate(&eval)?;
    cls.accuracy = Some(acc);
    cls.ensure_trained()?;
    Ok((cls, losses))
}
