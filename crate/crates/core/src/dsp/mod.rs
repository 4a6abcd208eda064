//! Audio ingestion and analysis: WAV I/O, resampling, peak normalisation and
//! silence trimming, the log-mel transform used by the models, and the F0 and
//! mel-cepstral analysers used by the evaluation metrics.

mod f0;
mod mcep;
mod mel;
mod resample;
mod wav;

pub use f0::{estimate_f0, F0Track, F0_MAX_HZ, F0_MIN_HZ};
pub use mcep::{extract_mcep, McepSequence, MCEP_ORDER};
pub use mel::{
    mel_filterbank, mel_frame_count, mel_spectrogram, mel_spectrogram_tape, MelSpectrogram, MEL_LOG_FLOOR,
};
pub use resample::resample;
pub use wav::{load_wav, read_wav, save_wav, write_wav};

use crate::error::{Error, Result};

/// Peak level after [`normalize_and_trim`].
pub const PEAK_LEVEL: f64 = 0.95;

/// Analysis hop used by F0 and mel-cepstral extraction, in seconds.
pub const ANALYSIS_FRAME_PERIOD: f64 = 0.005;

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(AudioBuffer { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub(crate) fn require_rate(&self, rate: u32) -> Result<()> {
        if self.sample_rate != rate {
            return Err(Error::Config(format!("expected {rate} Hz audio, got {} Hz", self.sample_rate)));
        }
        Ok(())
    }
}

/// Scales the peak to [`PEAK_LEVEL`] and strips leading and trailing samples
/// quieter than `silence_threshold_db` relative to that peak.
///
/// Trimming is sample-accurate: the kept span runs from the first to the last
/// sample whose magnitude reaches the threshold.
pub fn normalize_and_trim(buf: &AudioBuffer, silence_threshold_db: f64) -> Result<AudioBuffer> {
    let peak = buf.peak();
    if buf.is_empty() || peak == 0.0 {
        return Err(Error::EmptyAudio);
    }
    let gain = PEAK_LEVEL / peak;
    let threshold = PEAK_LEVEL * 10f64.powf(silence_threshold_db / 20.0);
    let scaled: Vec<f64> = buf.samples.iter().map(|&x| x * gain).collect();
    let loud = |x: &f64| x.abs() >= threshold;
    let start = scaled.iter().position(loud).ok_or(Error::EmptyAudio)?;
    let end = scaled.iter().rposition(loud).ok_or(Error::EmptyAudio)? + 1;
    Ok(AudioBuffer { samples: scaled[start..end].to_vec(), sample_rate: buf.sample_rate })
}

/// Resamples to the pipeline rate, then normalises and trims.
pub fn prepare(buf: &AudioBuffer, silence_threshold_db: f64) -> Result<AudioBuffer> {
    let buf = resample(buf, crate::SAMPLE_RATE)?;
    normalize_and_trim(&buf, silence_threshold_db)
}

/// Centre sample of analysis frame `i` at the fixed 5 ms frame period.
pub(crate) fn analysis_center(i: usize, sample_rate: u32) -> usize {
    (i as f64 * ANALYSIS_FRAME_PERIOD * sample_rate as f64).round() as usize
}

pub(crate) fn analysis_frame_count(len: usize, sample_rate: u32) -> usize {
    if len == 0 {
        return 0;
    }
    let hop = ANALYSIS_FRAME_PERIOD * sample_rate as f64;
    ((len - 1) as f64 / hop).floor() as usize + 1
}

/// Periodic Hann window.
pub(crate) fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}
