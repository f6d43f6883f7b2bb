//! 16-bit mono PCM export.

use std::path::Path;

use crate::error::{Error, Result};

/// Full-scale quantisation: `round(x · 32767)`.
pub fn quantize_sample(x: f64) -> i16 {
    (x * 32767.0).round() as i16
}

/// Writes `x` (every value in `[-1, 1]`) as a 16-bit mono WAV file. Out of
/// range samples are an error; callers clamp explicitly.
pub fn write_wav(x: &[f64], sample_rate: u32, path: &Path) -> Result<()> {
    if let Some((index, &value)) = x
        .iter()
        .enumerate()
        .find(|(_, v)| !(-1.0..=1.0).contains(*v))
    {
        return Err(Error::WavRange { index, value });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &v in x {
        w.write_sample(quantize_sample(v))?;
    }
    w.finalize()?;
    Ok(())
}
