use std::f64::consts::PI;

use super::AudioBuffer;
use crate::error::{Error, Result};

/// Zero crossings of the interpolation kernel on each side.
const ZERO_CROSSINGS: f64 = 24.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    0.42 + 0.5 * (PI * x).cos() + 0.08 * (2.0 * PI * x).cos()
}

/// Band-limited resampling by windowed-sinc interpolation.
///
/// The output holds `round(len · target / source)` samples. When
/// downsampling, the kernel cutoff moves to the target Nyquist frequency.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let ratio = target_rate as f64 / buf.sample_rate as f64;
    let out_len = (buf.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let x = &buf.samples;
    let samples = (0..out_len)
        .map(|n| {
            let pos = n as f64 / ratio;
            let lo = (pos - half_width).ceil().max(0.0) as usize;
            let hi = ((pos + half_width).floor() as usize).min(x.len().saturating_sub(1));
            (lo..=hi)
                .map(|k| {
                    let d = pos - k as f64;
                    x[k] * cutoff * sinc(cutoff * d) * blackman(d / half_width)
                })
                .sum()
        })
        .collect();
    AudioBuffer::new(samples, target_rate)
}
