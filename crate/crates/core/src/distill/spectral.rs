//! Short-time power spectra and the power loss.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hann,
    Rectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpectrogramSpec {
    pub window_length: usize,
    pub hop_length: usize,
    pub window: Window,
}

impl Default for SpectrogramSpec {
    fn default() -> Self {
        SpectrogramSpec {
            window_length: 256,
            hop_length: 64,
            window: Window::Hann,
        }
    }
}

impl SpectrogramSpec {
    pub fn new(window_length: usize, hop_length: usize, window: Window) -> Result<Self> {
        if hop_length == 0 || hop_length > window_length {
            return Err(Error::Config(format!(
                "spectrogram needs 0 < hop <= window, got hop {hop_length}, window {window_length}"
            )));
        }
        Ok(SpectrogramSpec {
            window_length,
            hop_length,
            window,
        })
    }

    pub fn bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    pub fn num_frames(&self, t: usize) -> usize {
        if t < self.window_length {
            0
        } else {
            1 + (t - self.window_length) / self.hop_length
        }
    }

    /// Window samples; Hann is the periodic form `½ − ½·cos(2πn/N)`.
    pub fn window_values(&self) -> Vec<f64> {
        let n = self.window_length;
        match self.window {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }

    /// `Σ w²`, used to normalise power.
    pub fn window_energy(&self) -> f64 {
        self.window_values().iter().map(|w| w * w).sum()
    }

    /// Windowed DFT basis `[W, bins]` for the real and imaginary parts.
    fn bases(&self) -> (Tensor, Tensor) {
        let (n, bins) = (self.window_length, self.bins());
        let w = self.window_values();
        let mut re = Vec::with_capacity(n * bins);
        let mut im = Vec::with_capacity(n * bins);
        for (i, wi) in w.iter().enumerate() {
            for k in 0..bins {
                // Reduce the phase index first so large products stay exact.
                let phase = 2.0 * PI * ((i * k) % n) as f64 / n as f64;
                re.push(wi * phase.cos());
                im.push(-wi * phase.sin());
            }
        }
        (
            Tensor::new(vec![1, n, bins], re).unwrap(),
            Tensor::new(vec![1, n, bins], im).unwrap(),
        )
    }
}

/// `|STFT(x)|²` of `[B, T]` or `[B, 1, T]` signals: `[B, frames, bins]`.
pub fn stft_power(g: &mut Graph, x: Var, spec: &SpectrogramSpec) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, t) = match shape.as_slice() {
        [b, t] => (*b, *t),
        [b, 1, t] => (*b, *t),
        _ => {
            return Err(Error::InvalidShape {
                op: "stft_power",
                shape,
                reason: "expected [B, T] or [B, 1, T]".into(),
            })
        }
    };
    if t < spec.window_length {
        return Err(Error::InvalidArgument(format!(
            "stft_power needs at least {} samples, got {t}",
            spec.window_length
        )));
    }
    let flat = g.reshape(x, &[b, t])?;
    let frames = g.frames(flat, spec.window_length, spec.hop_length)?;
    let nf = spec.num_frames(t);
    let stacked = g.reshape(frames, &[1, b * nf, spec.window_length])?;
    let (re_basis, im_basis) = spec.bases();
    let re_b = g.constant(re_basis);
    let im_b = g.constant(im_basis);
    let re = g.matmul(stacked, re_b)?;
    let im = g.matmul(stacked, im_b)?;
    let re2 = g.square(re);
    let im2 = g.square(im);
    let p = g.add(re2, im2)?;
    g.reshape(p, &[b, nf, spec.bins()])
}

/// Time-averaged power spectrum `[B, 1, bins]`, normalised by the window
/// energy.
pub fn average_power(g: &mut Graph, x: Var, spec: &SpectrogramSpec) -> Result<Var> {
    let p = stft_power(g, x, spec)?;
    let nf = g.shape(p)[1] as f64;
    let s = g.sum_axis(p, 1)?;
    Ok(g.scale(s, 1.0 / (nf * spec.window_energy())))
}

/// Squared distance between time-averaged power spectra, averaged over the
/// batch.
pub fn power_loss(g: &mut Graph, x_gen: Var, y_ref: &Tensor, spec: &SpectrogramSpec) -> Result<Var> {
    if g.shape(x_gen) != y_ref.shape() {
        return Err(Error::ShapeMismatch {
            op: "power_loss",
            left: g.shape(x_gen).to_vec(),
            right: y_ref.shape().to_vec(),
        });
    }
    let b = y_ref.shape()[0] as f64;
    let pg = average_power(g, x_gen, spec)?;
    let yv = g.constant(y_ref.clone());
    let pr = average_power(g, yv, spec)?;
    let d = g.sub(pg, pr)?;
    let d2 = g.square(d);
    let s = g.sum(d2);
    Ok(g.scale(s, 1.0 / b))
}

/// Time-averaged power spectrum of every row, pooled over the batch.
pub fn average_power_spectrum(x: &Tensor, spec: &SpectrogramSpec) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = average_power(&mut g, xv, spec)?;
    let v = g.value(p);
    let bins = spec.bins();
    let rows = v.len() / bins;
    let mut out = vec![0.0; bins];
    for row in v.data().chunks(bins) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += r / rows as f64;
        }
    }
    Ok(out)
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_difference, rel_err};
    use crate::rng::RngStream;

    fn power_of(x: &Tensor, spec: &SpectrogramSpec) -> Tensor {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let p = stft_power(&mut g, v, spec).unwrap();
        g.value(p).clone()
    }

    #[test]
    fn zeros_give_zero_power() {
        let spec = SpectrogramSpec::default();
        let p = power_of(&Tensor::zeros(&[2, 1, 512]), &spec);
        assert_eq!(p.shape(), &[2, 5, 129]);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centred_sine_concentrates_energy() {
        let spec = SpectrogramSpec::default();
        let k0 = 20.0;
        let x = Tensor::from_fn(&[1, 1024], |n| (2.0 * PI * k0 * n as f64 / 256.0).sin());
        let p = power_of(&x, &spec);
        for frame in p.data().chunks(spec.bins()) {
            let total: f64 = frame.iter().sum();
            assert!(frame[20] / total > 0.95 * 0.5, "{}", frame[20] / total);
            // Hann leaks into the two neighbours; the peak bin dominates.
            let near: f64 = frame[19..=21].iter().sum();
            assert!(near / total > 0.95);
        }
        let rect = SpectrogramSpec::new(256, 64, Window::Rectangular).unwrap();
        for frame in power_of(&x, &rect).data().chunks(rect.bins()) {
            assert!(frame[20] / frame.iter().sum::<f64>() > 0.95);
        }
    }

    #[test]
    fn parseval_per_rectangular_frame() {
        let spec = SpectrogramSpec::new(64, 32, Window::Rectangular).unwrap();
        let mut rng = RngStream::new(1, 0);
        let x = Tensor::from_fn(&[1, 256], |_| rng.normal());
        let p = power_of(&x, &spec);
        let n = 64;
        for (f, frame) in p.data().chunks(spec.bins()).enumerate() {
            // Full spectrum from the one-sided bins: interior bins count twice.
            let full: f64 = frame[0] + frame[n / 2] + 2.0 * frame[1..n / 2].iter().sum::<f64>();
            let energy: f64 = x.data()[f * 32..f * 32 + n].iter().map(|v| v * v).sum();
            assert!((full - n as f64 * energy).abs() < 1e-8 * full.max(1.0));
        }
    }

    #[test]
    fn short_input_and_bad_spec_are_rejected() {
        assert!(SpectrogramSpec::new(64, 0, Window::Hann).is_err());
        assert!(SpectrogramSpec::new(64, 65, Window::Hann).is_err());
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 100]));
        assert!(stft_power(&mut g, x, &SpectrogramSpec::default()).is_err());
    }

    #[test]
    fn power_loss_examples() {
        let spec = SpectrogramSpec::default();
        let x = Tensor::from_fn(&[1, 1, 1024], |n| (2.0 * PI * 0.05 * n as f64).sin());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let same = power_loss(&mut g, xv, &x, &spec).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let silent = g.constant(Tensor::zeros(&[1, 1, 1024]));
        let diff = power_loss(&mut g, silent, &x, &spec).unwrap();
        assert!(g.value(diff).item() > 0.0);
        let short = g.constant(Tensor::zeros(&[1, 1, 1000]));
        assert!(power_loss(&mut g, short, &x, &spec).is_err());
    }

    #[test]
    fn power_loss_is_nearly_shift_invariant() {
        let spec = SpectrogramSpec::default();
        let mut rng = RngStream::new(2, 0);
        let t = 4096;
        let noise: Vec<f64> = (0..t).map(|_| 0.3 * rng.normal()).collect();
        let x = Tensor::from_fn(&[1, 1, t], |n| {
            noise[n] + (2.0 * PI * 0.03 * n as f64).sin() + 0.5 * (2.0 * PI * 0.11 * n as f64).sin()
        });
        let shifted = Tensor::from_fn(&[1, 1, t], |n| x.data()[(n + t - 64) % t]);
        let reference = Tensor::from_fn(&[1, 1, t], |_| 0.2 * rng.normal());
        let loss = |a: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(a.clone());
            let l = power_loss(&mut g, v, &reference, &spec).unwrap();
            g.value(l).item()
        };
        let (a, b) = (loss(&x), loss(&shifted));
        assert!((a - b).abs() / a < 0.05, "{a} vs {b}");
    }

    #[test]
    fn stft_power_gradient_matches_finite_differences() {
        let spec = SpectrogramSpec::new(16, 4, Window::Hann).unwrap();
        let mut rng = RngStream::new(3, 0);
        let x = Tensor::from_fn(&[2, 1, 40], |_| rng.normal());
        let y = Tensor::from_fn(&[2, 1, 40], |_| rng.normal());
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let l = power_loss(&mut g, v, &y, &spec).unwrap();
            let val = g.value(l).item();
            (val, g.backward(l).unwrap().wrt(v).unwrap().clone())
        };
        let (_, grad) = f(&x);
        for idx in [0usize, 7, 23, 41, 79] {
            let fd = central_difference(
                |v| {
                    let mut xp = x.clone();
                    xp.data_mut()[idx] = v;
                    f(&xp).0
                },
                x.data()[idx],
                1e-6,
            );
            assert!(rel_err(grad.data()[idx], fd, 1e-8) < 1e-4, "{idx}");
        }
    }
}
