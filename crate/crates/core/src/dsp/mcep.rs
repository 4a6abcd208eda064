use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{analysis_center, analysis_frame_count, hann, mel_filterbank, AudioBuffer, ANALYSIS_FRAME_PERIOD};
use crate::error::{Error, Result};
use crate::{MEL_BINS, SAMPLE_RATE, WIN_LENGTH};

/// Coefficients per frame: c0 (log gain) plus 34.
pub const MCEP_ORDER: usize = 35;
const LOG_FLOOR: f64 = 1e-5;

/// Mel-cepstral frames at a 5 ms period. Each frame holds c0..c34.
#[derive(Debug, Clone, PartialEq)]
pub struct McepSequence {
    pub frames: Vec<Vec<f64>>,
    pub frame_period: f64,
}

impl McepSequence {
    pub fn new(frames: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(bad) = frames.iter().find(|f| f.len() != MCEP_ORDER) {
            return Err(Error::dim(format!("mcep frame has {} coefficients, expected {MCEP_ORDER}", bad.len())));
        }
        Ok(McepSequence { frames, frame_period: ANALYSIS_FRAME_PERIOD })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Cepstral approximation of a mel-warped spectral envelope: the orthonormal
/// DCT-II of the 80-band log-mel magnitude spectrum, truncated to c0..c34.
pub fn extract_mcep(buf: &AudioBuffer) -> Result<McepSequence> {
    buf.require_rate(SAMPLE_RATE)?;
    if buf.len() < WIN_LENGTH {
        return Err(Error::TooShort { needed: WIN_LENGTH, got: buf.len() });
    }
    let n_freqs = WIN_LENGTH / 2 + 1;
    let fb = mel_filterbank(SAMPLE_RATE, WIN_LENGTH, MEL_BINS, 0.0, SAMPLE_RATE as f64 / 2.0);
    let window = hann(WIN_LENGTH);
    let dct = dct_basis(MEL_BINS, MCEP_ORDER);
    let fft = FftPlanner::new().plan_fft_forward(WIN_LENGTH);
    let mut scratch = vec![Complex::new(0.0, 0.0); WIN_LENGTH];
    let mut log_mel = vec![0.0; MEL_BINS];

    let n_frames = analysis_frame_count(buf.len(), buf.sample_rate);
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = analysis_center(i, buf.sample_rate) as isize - (WIN_LENGTH / 2) as isize;
        for (n, c) in scratch.iter_mut().enumerate() {
            let j = start + n as isize;
            let x = if j >= 0 && (j as usize) < buf.len() { buf.samples[j as usize] } else { 0.0 };
            *c = Complex::new(x * window[n], 0.0);
        }
        fft.process(&mut scratch);
        for (b, lm) in log_mel.iter_mut().enumerate() {
            let row = &fb[b * n_freqs..(b + 1) * n_freqs];
            let e: f64 = row.iter().zip(&scratch).map(|(w, c)| w * c.norm()).sum();
            *lm = e.max(LOG_FLOOR).ln();
        }
        let coeffs = (0..MCEP_ORDER)
            .map(|k| dct[k * MEL_BINS..(k + 1) * MEL_BINS].iter().zip(&log_mel).map(|(d, v)| d * v).sum())
            .collect();
        frames.push(coeffs);
    }
    McepSequence::new(frames)
}

/// Orthonormal DCT-II rows `[n_coeffs × n]`.
fn dct_basis(n: usize, n_coeffs: usize) -> Vec<f64> {
    let mut basis = vec![0.0; n * n_coeffs];
    for k in 0..n_coeffs {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            basis[k * n + i] = scale * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos();
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn noise(len: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.gen_range(-0.2..0.2)).collect(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn deterministic() {
        let buf = noise(4000, 1);
        assert_eq!(extract_mcep(&buf).unwrap(), extract_mcep(&buf).unwrap());
    }

    #[test]
    fn gain_only_moves_c0() {
        let buf = noise(4000, 2);
        let loud = AudioBuffer::new(buf.samples.iter().map(|x| 2.0 * x).collect(), SAMPLE_RATE).unwrap();
        let (a, b) = (extract_mcep(&buf).unwrap(), extract_mcep(&loud).unwrap());
        // ln 2 on every band moves c0 by sqrt(80)·ln 2 under the orthonormal DCT
        let expected_c0 = (MEL_BINS as f64).sqrt() * 2f64.ln();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert!((fb[0] - fa[0] - expected_c0).abs() < 1e-8);
            for k in 1..MCEP_ORDER {
                assert!((fa[k] - fb[k]).abs() < 1e-8, "c{k}: {} vs {}", fa[k], fb[k]);
            }
        }
    }

    #[test]
    fn silence_has_flat_cepstrum() {
        let seq = extract_mcep(&AudioBuffer::new(vec![0.0; 2048], SAMPLE_RATE).unwrap()).unwrap();
        for f in &seq.frames {
            assert!(f[1..].iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn too_short_input() {
        let err = extract_mcep(&AudioBuffer::new(vec![0.0; 100], SAMPLE_RATE).unwrap()).unwrap_err();
        assert!(matches!(err, Error::TooShort { .. }));
    }
}
