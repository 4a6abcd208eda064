use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{hann, AudioBuffer};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use crate::{HOP_LENGTH, MEL_BINS, SAMPLE_RATE, WIN_LENGTH};

/// Lower clamp applied before the natural log.
pub const MEL_LOG_FLOOR: f64 = 1e-5;
/// Added to the squared magnitude so the square root stays differentiable.
const MAGNITUDE_EPS: f64 = 1e-9;
const N_FREQS: usize = WIN_LENGTH / 2 + 1;

/// Log-mel magnitudes, `bins × frames`, row-major by bin.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    bins: usize,
    frames: usize,
    values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(bins: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if bins == 0 || frames == 0 || values.len() != bins * frames {
            return Err(Error::dim(format!("mel {bins}x{frames} with {} values", values.len())));
        }
        Ok(MelSpectrogram { bins, frames, values })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.bins).map(|b| self.get(b, frame)).collect()
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::dim(format!("frame slice {start}+{len} of {}", self.frames)));
        }
        let values = (0..self.bins)
            .flat_map(|b| self.values[b * self.frames + start..b * self.frames + start + len].iter().copied())
            .collect();
        Ok(MelSpectrogram { bins: self.bins, frames: len, values })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.bins, self.frames]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        F_SP * m
    }
}

/// Slaney-style triangular filterbank, area-normalised, `n_mels × (n_fft/2+1)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let n_freqs = n_fft / 2 + 1;
    let (mmin, mmax) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mmin + (mmax - mmin) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * n_freqs];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..n_freqs {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            fb[m * n_freqs + k] = rise.min(fall).max(0.0) * norm;
        }
    }
    fb
}

struct MelTables {
    /// Filterbank transposed to `[n_freqs × MEL_BINS]`.
    fb_t: Arc<[f64]>,
    fb: Vec<f64>,
    /// Hann-windowed DFT bases, `[WIN_LENGTH × n_freqs]`.
    cos: Arc<[f64]>,
    sin: Arc<[f64]>,
    window: Vec<f64>,
}

fn tables() -> &'static MelTables {
    static TABLES: OnceLock<MelTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let fb = mel_filterbank(SAMPLE_RATE, WIN_LENGTH, MEL_BINS, 0.0, SAMPLE_RATE as f64 / 2.0);
        let mut fb_t = vec![0.0; fb.len()];
        for m in 0..MEL_BINS {
            for k in 0..N_FREQS {
                fb_t[k * MEL_BINS + m] = fb[m * N_FREQS + k];
            }
        }
        let window = hann(WIN_LENGTH);
        let mut cos = vec![0.0; WIN_LENGTH * N_FREQS];
        let mut sin = vec![0.0; WIN_LENGTH * N_FREQS];
        for n in 0..WIN_LENGTH {
            for k in 0..N_FREQS {
                // reduce the phase index exactly before converting to an angle
                let phase = ((n * k) % WIN_LENGTH) as f64 * 2.0 * std::f64::consts::PI / WIN_LENGTH as f64;
                cos[n * N_FREQS + k] = window[n] * phase.cos();
                sin[n * N_FREQS + k] = -window[n] * phase.sin();
            }
        }
        MelTables { fb_t: fb_t.into(), fb, cos: cos.into(), sin: sin.into(), window }
    })
}

/// `floor(len / hop) + 1` centred frames.
pub fn mel_frame_count(len: usize) -> usize {
    len / HOP_LENGTH + 1
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    // one reflection suffices because the pad is shorter than the signal
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn check_len(len: usize) -> Result<()> {
    if len < WIN_LENGTH {
        return Err(Error::TooShort { needed: WIN_LENGTH, got: len });
    }
    Ok(())
}

/// Index of every windowed sample: `frames × WIN_LENGTH`, reflection padded.
fn frame_indices(len: usize) -> Vec<usize> {
    let frames = mel_frame_count(len);
    let half = (WIN_LENGTH / 2) as isize;
    let mut idx = Vec::with_capacity(frames * WIN_LENGTH);
    for t in 0..frames {
        let start = (t * HOP_LENGTH) as isize - half;
        idx.extend((0..WIN_LENGTH as isize).map(|n| reflect(start + n, len)));
    }
    idx
}

/// The log-mel transform applied to 22.05 kHz audio.
///
/// Centred frames with reflection padding, periodic Hann window of 1024,
/// hop 256, magnitude spectrum, 80 Slaney mel bands over 0 to Nyquist,
/// natural log clamped at [`MEL_LOG_FLOOR`].
pub fn mel_spectrogram(buf: &AudioBuffer) -> Result<MelSpectrogram> {
    buf.require_rate(SAMPLE_RATE)?;
    check_len(buf.len())?;
    let tables = tables();
    let frames = mel_frame_count(buf.len());
    let idx = frame_indices(buf.len());
    let fft = FftPlanner::new().plan_fft_forward(WIN_LENGTH);
    let mut scratch = vec![Complex::new(0.0, 0.0); WIN_LENGTH];
    let mut mag = vec![0.0; N_FREQS];
    let mut values = vec![0.0; MEL_BINS * frames];
    for t in 0..frames {
        for (n, c) in scratch.iter_mut().enumerate() {
            *c = Complex::new(buf.samples[idx[t * WIN_LENGTH + n]] * tables.window[n], 0.0);
        }
        fft.process(&mut scratch);
        for (m, c) in mag.iter_mut().zip(&scratch) {
            *m = (c.norm_sqr() + MAGNITUDE_EPS).sqrt();
        }
        for b in 0..MEL_BINS {
            let row = &tables.fb[b * N_FREQS..(b + 1) * N_FREQS];
            let e: f64 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
            values[b * frames + t] = e.max(MEL_LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(MEL_BINS, frames, values)
}

/// The same transform recorded on a tape so gradients flow back to the
/// waveform. `wav` is `[1 × L]` or `[L]`; the result is `[80 × T]`.
pub fn mel_spectrogram_tape(tape: &mut Tape, wav: Var) -> Result<Var> {
    let len = tape.value(wav).len();
    let shape = tape.shape(wav);
    if !(shape.len() == 1 || (shape.len() == 2 && shape[0] == 1)) {
        return Err(Error::dim(format!("mel expects a mono waveform, got {shape:?}")));
    }
    check_len(len)?;
    let tables = tables();
    let frames = mel_frame_count(len);
    let framed = tape.gather(wav, frame_indices(len).into(), [frames, WIN_LENGTH])?;
    let re = tape.matmul_const(framed, tables.cos.clone(), (WIN_LENGTH, N_FREQS))?;
    let im = tape.matmul_const(framed, tables.sin.clone(), (WIN_LENGTH, N_FREQS))?;
    let re2 = tape.square(re);
    let im2 = tape.square(im);
    let power = tape.add(re2, im2)?;
    let power = tape.add_scalar(power, MAGNITUDE_EPS);
    let mag = tape.sqrt(power);
    let mel = tape.matmul_const(mag, tables.fb_t.clone(), (N_FREQS, MEL_BINS))?;
    let mel = tape.transpose(mel)?;
    Ok(tape.log_clamp(mel, MEL_LOG_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, len: usize, amp: f64) -> AudioBuffer {
        let s = (0..len)
            .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        AudioBuffer::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_has_87_frames() {
        let mel = mel_spectrogram(&sine(440.0, 22050, 0.5)).unwrap();
        assert_eq!(mel.shape(), [80, 87]);
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let mel = mel_spectrogram(&AudioBuffer::new(vec![0.0; 4096], SAMPLE_RATE).unwrap()).unwrap();
        assert!(mel.values().iter().all(|&v| v == MEL_LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_peaks_in_nearest_band() {
        let mel = mel_spectrogram(&sine(1000.0, 8192, 0.5)).unwrap();
        // oracle: band whose centre frequency is nearest 1 kHz
        let mmax = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
        let nearest = (0..MEL_BINS)
            .min_by(|&a, &b| {
                let ca = mel_to_hz(mmax * (a + 1) as f64 / (MEL_BINS + 1) as f64);
                let cb = mel_to_hz(mmax * (b + 1) as f64 / (MEL_BINS + 1) as f64);
                (ca - 1000.0).abs().total_cmp(&(cb - 1000.0).abs())
            })
            .unwrap();
        let col = mel.column(mel.frames() / 2);
        let argmax = (0..MEL_BINS).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn short_and_wrong_rate_inputs_fail() {
        assert!(matches!(
            mel_spectrogram(&AudioBuffer::new(vec![0.0; 1000], SAMPLE_RATE).unwrap()),
            Err(Error::TooShort { .. })
        ));
        assert!(mel_spectrogram(&AudioBuffer::new(vec![0.0; 4096], 16000).unwrap()).is_err());
    }

    #[test]
    fn filterbank_rows_are_valid() {
        let fb = mel_filterbank(SAMPLE_RATE, WIN_LENGTH, MEL_BINS, 0.0, 11025.0);
        let mut last_peak = None;
        for m in 0..MEL_BINS {
            let row = &fb[m * N_FREQS..(m + 1) * N_FREQS];
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0, "row {m} empty");
            let peak = (0..N_FREQS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            if let Some(prev) = last_peak {
                assert!(peak >= prev, "peak of row {m} moved backwards");
            }
            last_peak = Some(peak);
        }
    }

    #[test]
    fn tape_path_matches_fft_path() {
        let buf = sine(523.0, 3000, 0.3);
        let plain = mel_spectrogram(&buf).unwrap();
        let mut tape = Tape::new();
        let wav = tape.leaf([1, buf.len()], buf.samples.clone(), false);
        let mel = mel_spectrogram_tape(&mut tape, wav).unwrap();
        assert_eq!(tape.shape(mel), &[80, plain.frames()]);
        for (a, b) in tape.value(mel).iter().zip(plain.values()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
