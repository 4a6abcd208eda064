//! Cycle-consistent, mask-augmented adversarial voice conversion that maps
//! mel-spectrograms straight to raw waveforms, with the objective evaluation
//! measures used to score conversions.
//!
//! Module map:
//! - [`tensor`]: `f64` tensors, a reverse-mode gradient tape, Adam.
//! - [`dsp`]: WAV I/O, resampling, trimming, the log-mel transform, F0 and
//!   mel-cepstral analysis.
//! - [`data`]: temporal masks and training segment batches.
//! - [`model`]: the mel-to-waveform generator and the MPD/MSD discriminators.
//! - [`losses`]: least-squares adversarial, cycle, identity and aggregate objectives.
//! - [`train`]: configuration, the training step, checkpoints and conversion.
//! - [`metrics`]: DTW, MCD, fwSNRseg, log-F0 RMSE and corpus reports.

pub mod data;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Output sample rate of the whole pipeline.
pub const SAMPLE_RATE: u32 = 22_050;
/// Waveform samples per mel frame.
pub const HOP_LENGTH: usize = 256;
/// STFT window and FFT size.
pub const WIN_LENGTH: usize = 1024;
/// Mel bands.
pub const MEL_BINS: usize = 80;
