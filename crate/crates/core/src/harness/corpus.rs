//! Synthetic conditioned waveforms: pseudo-phones rendered as harmonic
//! templates over a smooth pitch contour, per speaker.

use std::f64::consts::PI;

use crate::distributions::DiscretizationSpec;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::teacher::ConditioningSeq;
use crate::tensor::Tensor;

const HARMONICS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub num_phones: usize,
    pub num_speakers: usize,
    pub sample_rate: usize,
    pub clip_length: usize,
    pub frame_rate_divisor: usize,
    /// Fundamental frequency interval in Hz.
    pub f0_range: (f64, f64),
    pub num_clips: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_phones: 6,
            num_speakers: 2,
            sample_rate: 4000,
            clip_length: 2048,
            frame_rate_divisor: 64,
            f0_range: (110.0, 220.0),
            num_clips: 64,
            noise_level: 0.01,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_phones < 2 || self.num_speakers == 0 || self.num_clips == 0 {
            return Err(Error::Config(
                "corpus needs >= 2 phones, >= 1 speaker and >= 1 clip".into(),
            ));
        }
        if self.frame_rate_divisor == 0 || self.clip_length % self.frame_rate_divisor != 0 {
            return Err(Error::Config(format!(
                "clip_length {} must be a positive multiple of frame_rate_divisor {}",
                self.clip_length, self.frame_rate_divisor
            )));
        }
        let (lo, hi) = self.f0_range;
        if !(lo > 0.0 && hi > lo && hi * (HARMONICS as f64) < self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!("bad f0_range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// One-hot phone, normalised log-f0, one-hot speaker.
    pub fn conditioning_channels(&self) -> usize {
        self.num_phones + 1 + self.num_speakers
    }

    pub fn frames_per_clip(&self) -> usize {
        self.clip_length / self.frame_rate_divisor
    }

    /// Relative harmonic amplitudes of a phone; the fundamental is always
    /// the strongest partial.
    pub fn phone_template(&self, phone: usize) -> [f64; HARMONICS] {
        let mut rng = RngStream::derive(self.seed, "phone-template", phone as u64);
        let mut a = [0.0; HARMONICS];
        a[0] = 1.0;
        for (h, slot) in a.iter_mut().enumerate().skip(1) {
            // Alternate strong/weak partials by phone so templates differ.
            let shape = 0.5 + 0.5 * (PI * h as f64 * (phone as f64 + 1.0) / 3.7).cos();
            *slot = 0.08 + 0.62 * shape * (0.7 + 0.3 * rng.uniform_open());
        }
        a
    }

    fn speaker_f0(&self, speaker: usize) -> f64 {
        let (lo, hi) = self.f0_range;
        lo + (hi - lo) * (speaker as f64 + 0.5) / self.num_speakers as f64
    }

    /// `2·(ln f0 − ln lo)/(ln hi − ln lo) − 1`.
    pub fn normalized_log_f0(&self, f0: f64) -> f64 {
        let (lo, hi) = self.f0_range;
        2.0 * (f0.ln() - lo.ln()) / (hi.ln() - lo.ln()) - 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub wave: Vec<f64>,
    /// `[C, frames]`.
    pub cond: Tensor,
    pub phones: Vec<usize>,
    pub speaker: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub clips: Vec<Clip>,
}

/// Renders the whole corpus; identical specs give identical bytes.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let clips = (0..spec.num_clips)
        .map(|i| synth_clip(spec, i as u64))
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        clips,
    })
}

fn synth_clip(spec: &CorpusSpec, index: u64) -> Clip {
    let mut rng = RngStream::derive(spec.seed, "clip", index);
    let nf = spec.frames_per_clip();
    let div = spec.frame_rate_divisor;
    let speaker = rng.below(spec.num_speakers as u64) as usize;

    let mut phones = Vec::with_capacity(nf);
    while phones.len() < nf {
        let p = rng.below(spec.num_phones as u64) as usize;
        let dur = 3 + rng.below(6) as usize;
        phones.extend(std::iter::repeat_n(p, dur.min(nf - phones.len())));
    }

    let base = spec.speaker_f0(speaker);
    let period = 0.25 + 0.5 * rng.uniform_open();
    let wobble_phase = 2.0 * PI * rng.uniform_open();
    let sr = spec.sample_rate as f64;
    let f0_at = |n: usize| base * (1.0 + 0.03 * (2.0 * PI * n as f64 / (period * sr) + wobble_phase).sin());

    let templates: Vec<[f64; HARMONICS]> = (0..spec.num_phones).map(|p| spec.phone_template(p)).collect();
    let offsets: Vec<f64> = (0..HARMONICS).map(|_| 2.0 * PI * rng.uniform_open()).collect();
    let mut phase = 0.0;
    let mut wave = Vec::with_capacity(spec.clip_length);
    for n in 0..spec.clip_length {
        let a = &templates[phones[n / div]];
        let v: f64 = (0..HARMONICS)
            .map(|h| a[h] * ((h + 1) as f64 * phase + offsets[h]).sin())
            .sum();
        wave.push(v + spec.noise_level * rng.normal());
        phase = (phase + 2.0 * PI * f0_at(n) / sr) % (2.0 * PI);
    }
    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in &mut wave {
        *v *= 0.9 / peak;
    }

    let c = spec.conditioning_channels();
    let mut cond = Tensor::zeros(&[c, nf]);
    for (f, &p) in phones.iter().enumerate() {
        cond.set(&[p, f], 1.0);
        let f0 = f0_at(f * div + div / 2);
        cond.set(&[spec.num_phones, f], spec.normalized_log_f0(f0));
        cond.set(&[spec.num_phones + 1 + speaker, f], 1.0);
    }
    Clip {
        wave,
        cond,
        phones,
        speaker,
    }
}

/// A minibatch of frame-aligned crops.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 1, T]`.
    pub wave: Tensor,
    pub cond: ConditioningSeq,
    /// Phone id of every frame, row-major `[B, frames]`.
    pub phones: Vec<usize>,
}

impl Corpus {
    /// Clips `[0, n − held_out)` train, the rest are held out.
    pub fn split(&self, held_out: usize) -> (Vec<usize>, Vec<usize>) {
        let n = self.clips.len();
        let cut = n.saturating_sub(held_out);
        ((0..cut).collect(), (cut..n).collect())
    }

    /// Crops of `frames` frames starting at frame `starts[i]` of clip `ids[i]`.
    /// With `quantize`, samples are snapped to the grid.
    pub fn batch(
        &self,
        ids: &[usize],
        starts: &[usize],
        frames: usize,
        quantize: Option<&DiscretizationSpec>,
    ) -> Result<Batch> {
        let div = self.spec.frame_rate_divisor;
        let t = frames * div;
        let c = self.spec.conditioning_channels();
        let mut wave = Vec::with_capacity(ids.len() * t);
        let mut cond = Vec::with_capacity(ids.len() * c * frames);
        let mut phones = Vec::with_capacity(ids.len() * frames);
        for (&id, &start) in ids.iter().zip(starts) {
            let clip = self
                .clips
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("no clip {id}")))?;
            if start + frames > self.spec.frames_per_clip() {
                return Err(Error::InvalidArgument(format!(
                    "crop [{start}, {}) exceeds {} frames",
                    start + frames,
                    self.spec.frames_per_clip()
                )));
            }
            let samples = &clip.wave[start * div..start * div + t];
            match quantize {
                Some(q) => wave.extend(samples.iter().map(|&v| q.quantize(v))),
                None => wave.extend_from_slice(samples),
            }
            cond.extend_from_slice(clip.cond.narrow_last(start, start + frames).data());
            phones.extend_from_slice(&clip.phones[start..start + frames]);
        }
        Ok(Batch {
            wave: Tensor::new(vec![ids.len(), 1, t], wave)?,
            cond: ConditioningSeq::new(Tensor::new(vec![ids.len(), c, frames], cond)?, div)?,
            phones,
        })
    }

    /// Random crops from the given clip pool.
    pub fn random_batch(
        &self,
        pool: &[usize],
        batch: usize,
        frames: usize,
        quantize: Option<&DiscretizationSpec>,
        rng: &mut RngStream,
    ) -> Result<Batch> {
        let max_start = self.spec.frames_per_clip().saturating_sub(frames);
        let ids: Vec<usize> = (0..batch)
            .map(|_| pool[rng.below(pool.len() as u64) as usize])
            .collect();
        let starts: Vec<usize> = (0..batch)
            .map(|_| rng.below(max_start as u64 + 1) as usize)
            .collect();
        self.batch(&ids, &starts, frames, quantize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            num_clips: 12,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = synth_corpus(&small()).unwrap();
        let b = synth_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&CorpusSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.clips[0].wave, c.clips[0].wave);
    }

    #[test]
    fn clips_are_normalized() {
        let corpus = synth_corpus(&small()).unwrap();
        for clip in &corpus.clips {
            let rms = (clip.wave.iter().map(|v| v * v).sum::<f64>() / clip.wave.len() as f64).sqrt();
            assert!((0.05..=0.7).contains(&rms), "rms {rms}");
            assert!(clip.wave.iter().all(|v| v.abs() <= 0.9 + 1e-12));
            assert_eq!(clip.cond.shape(), &[9, 32]);
            for f in 0..32 {
                let onehot: f64 = (0..6).map(|p| clip.cond.at(&[p, f])).sum();
                assert_eq!(onehot, 1.0);
                assert!(clip.cond.at(&[6, f]).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn single_phone_peak_matches_f0() {
        let spec = CorpusSpec {
            num_clips: 4,
            ..CorpusSpec::default()
        };
        let corpus = synth_corpus(&spec).unwrap();
        let n = 256;
        let bin_hz = spec.sample_rate as f64 / n as f64;
        let mut checked = 0;
        for clip in &corpus.clips {
            // First run of at least four frames of the same phone.
            let Some(start) = (0..clip.phones.len() - 4)
                .find(|&f| clip.phones[f..f + 4].iter().all(|&p| p == clip.phones[f]))
            else {
                continue;
            };
            let s0 = start * spec.frame_rate_divisor;
            let seg = &clip.wave[s0..s0 + n];
            let power = |k: usize| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in seg.iter().enumerate() {
                    let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                    let ph = 2.0 * PI * (k * i) as f64 / n as f64;
                    re += w * v * ph.cos();
                    im -= w * v * ph.sin();
                }
                re * re + im * im
            };
            let peak = (1..n / 2).max_by(|&a, &b| power(a).total_cmp(&power(b))).unwrap();
            let centre = s0 + n / 2;
            let frame = centre / spec.frame_rate_divisor;
            let nl = clip.cond.at(&[spec.num_phones, frame]);
            let (lo, hi) = spec.f0_range;
            let f0 = ((nl + 1.0) / 2.0 * (hi.ln() - lo.ln()) + lo.ln()).exp();
            assert!((peak as f64 - f0 / bin_hz).abs() <= 1.0, "peak bin {peak}, f0 bin {}", f0 / bin_hz);
            checked += 1;
        }
        assert!(checked >= 2);
    }

    #[test]
    fn batches_are_frame_aligned() {
        let corpus = synth_corpus(&small()).unwrap();
        let q = DiscretizationSpec::new(8).unwrap();
        let b = corpus.batch(&[1, 3], &[0, 10], 8, Some(&q)).unwrap();
        assert_eq!(b.wave.shape(), &[2, 1, 512]);
        assert_eq!(b.cond.num_frames(), 8);
        assert_eq!(b.phones.len(), 16);
        assert_eq!(b.phones[8], corpus.clips[3].phones[10]);
        assert!(b.wave.data().iter().all(|&v| q.index_of(v).is_ok()));
        assert!(corpus.batch(&[0], &[30], 8, None).is_err());
    }
}
