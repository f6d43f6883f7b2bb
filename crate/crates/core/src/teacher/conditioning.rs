use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frame-rate conditioning features, `[B, C, n_frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSeq {
    frames: Tensor,
    frame_rate_divisor: usize,
}

impl ConditioningSeq {
    pub fn new(frames: Tensor, frame_rate_divisor: usize) -> Result<Self> {
        if frames.rank() != 3 || frame_rate_divisor == 0 {
            return Err(Error::InvalidShape {
                op: "ConditioningSeq",
                shape: frames.shape().to_vec(),
                reason: format!("need [B, C, frames] and divisor > 0 (got {frame_rate_divisor})"),
            });
        }
        Ok(ConditioningSeq {
            frames,
            frame_rate_divisor,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_rate_divisor(&self) -> usize {
        self.frame_rate_divisor
    }

    pub fn batch(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Longest waveform this conditioning covers.
    pub fn max_samples(&self) -> usize {
        self.num_frames() * self.frame_rate_divisor
    }

    /// Nearest-neighbour upsampling to `[B, C, samples]`.
    pub fn upsample(&self, samples: usize) -> Result<Tensor> {
        if samples > self.max_samples() {
            return Err(Error::InvalidArgument(format!(
                "conditioning covers {} samples, {samples} requested",
                self.max_samples()
            )));
        }
        let (b, c, nf) = (self.batch(), self.channels(), self.num_frames());
        let src = self.frames.data();
        let div = self.frame_rate_divisor;
        let mut data = Vec::with_capacity(b * c * samples);
        for row in 0..b * c {
            let frames = &src[row * nf..(row + 1) * nf];
            data.extend((0..samples).map(|t| frames[t / div]));
        }
        Tensor::new(vec![b, c, samples], data)
    }

    /// Rows `[start, end)` of the batch.
    pub fn select(&self, start: usize, end: usize) -> ConditioningSeq {
        ConditioningSeq {
            frames: self.frames.narrow_first(start, end),
            frame_rate_divisor: self.frame_rate_divisor,
        }
    }

    /// The batch rotated by `shift` rows, so row `b` takes row `b + shift`.
    pub fn roll_batch(&self, shift: usize) -> ConditioningSeq {
        let b = self.batch();
        let stride = self.frames.len() / b.max(1);
        let src = self.frames.data();
        let mut data = Vec::with_capacity(src.len());
        for row in 0..b {
            let from = (row + shift) % b;
            data.extend_from_slice(&src[from * stride..(from + 1) * stride]);
        }
        ConditioningSeq {
            frames: Tensor::new(self.frames.shape().to_vec(), data).unwrap(),
            frame_rate_divisor: self.frame_rate_divisor,
        }
    }

    /// Frames `[start, end)` of every row.
    pub fn frame_range(&self, start: usize, end: usize) -> ConditioningSeq {
        ConditioningSeq {
            frames: self.frames.narrow_last(start, end),
            frame_rate_divisor: self.frame_rate_divisor,
        }
    }

    pub fn stack(parts: &[ConditioningSeq]) -> Result<ConditioningSeq> {
        let div = parts
            .first()
            .map(|p| p.frame_rate_divisor)
            .ok_or_else(|| Error::InvalidArgument("empty conditioning batch".into()))?;
        let frames: Vec<Tensor> = parts.iter().map(|p| p.frames.clone()).collect();
        ConditioningSeq::new(Tensor::stack_first(&frames)?, div)
    }
}
