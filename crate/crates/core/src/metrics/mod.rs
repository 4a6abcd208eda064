//! Objective quality measures: mel-cepstral distortion, frequency-weighted
//! segmental SNR and log-F0 RMSE over DTW-aligned frames, plus corpus reports.

mod dtw;
mod report;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub use dtw::{dtw_align, euclidean, DtwPath};
pub use report::{evaluate_corpus, evaluate_pair, EvalPair, MetricReport, SkippedUtterance, UtteranceScores, CSV_HEADER};

use crate::dsp::{hann, mel_filterbank, AudioBuffer, F0Track, McepSequence, F0_MIN_HZ};
use crate::error::{Error, Result};

/// `10·√2 / ln 10`, the dB scaling of the cepstral distance.
pub const MCD_SCALE: f64 = 10.0 * std::f64::consts::SQRT_2 / std::f64::consts::LN_10;

pub const FWSNR_MIN_DB: f64 = -10.0;
pub const FWSNR_MAX_DB: f64 = 35.0;
pub const FWSNR_BANDS: usize = 25;
pub const FWSNR_WEIGHT_EXP: f64 = 0.2;
const FWSNR_FFT: usize = 1024;
const FWSNR_FRAME_SECS: f64 = 0.025;
const FWSNR_HOP_SECS: f64 = 0.010;

/// Mel-cepstral distortion in dB over DTW-aligned frames, using c1..c34.
pub fn mcd(target: &McepSequence, converted: &McepSequence) -> Result<f64> {
    if target.is_empty() || converted.is_empty() {
        return Err(Error::Contract("mcd needs non-empty sequences".into()));
    }
    let a: Vec<&[f64]> = target.frames.iter().map(|f| &f[1..]).collect();
    let b: Vec<&[f64]> = converted.frames.iter().map(|f| &f[1..]).collect();
    let path = dtw_align(&a, &b, |x, y| euclidean(x, y))?;
    let total: f64 = path.pairs.iter().map(|&(i, j)| euclidean(a[i], b[j])).sum();
    Ok(MCD_SCALE * total / path.pairs.len() as f64)
}

/// Frame length and hop in samples.
pub fn fwsnr_framing(sample_rate: u32) -> (usize, usize) {
    let sr = sample_rate as f64;
    ((FWSNR_FRAME_SECS * sr).round() as usize, (FWSNR_HOP_SECS * sr).round() as usize)
}

/// Weighted band SNR of one frame given the band magnitudes, or `None` when
/// the target frame carries no energy.
pub(crate) fn fwsnr_frame(target_bands: &[f64], converted_bands: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in target_bands.iter().zip(converted_bands) {
        let noise = (x - y) * (x - y);
        let snr = if noise == 0.0 { FWSNR_MAX_DB } else { 10.0 * (x * x / noise).log10() };
        let w = x.powf(FWSNR_WEIGHT_EXP);
        num += w * snr.clamp(FWSNR_MIN_DB, FWSNR_MAX_DB);
        den += w;
    }
    (den > 0.0).then(|| (num / den).clamp(FWSNR_MIN_DB, FWSNR_MAX_DB))
}

/// Frequency-weighted segmental SNR in dB.
///
/// Each 25 ms frame (10 ms hop, Hann window) is reduced to 25 mel-band
/// magnitudes. Band SNR `10·log10(X² / (X − Y)²)` is clipped to [−10, 35] and
/// averaged with weights `X^0.2`. Frames where the target is silent carry no
/// weight and are skipped. Inputs are truncated to the shorter length.
pub fn fwsnrseg(target: &AudioBuffer, converted: &AudioBuffer) -> Result<f64> {
    if target.sample_rate != converted.sample_rate {
        return Err(Error::Contract(format!(
            "sample rates differ: {} vs {}",
            target.sample_rate, converted.sample_rate
        )));
    }
    let (flen, hop) = fwsnr_framing(target.sample_rate);
    let len = target.len().min(converted.len());
    if len < flen {
        return Err(Error::Contract(format!("fwsnrseg needs at least {flen} samples, got {len}")));
    }
    let n_freqs = FWSNR_FFT / 2 + 1;
    let fb = mel_filterbank(target.sample_rate, FWSNR_FFT, FWSNR_BANDS, 0.0, target.sample_rate as f64 / 2.0);
    let window = hann(flen);
    let fft = FftPlanner::new().plan_fft_forward(FWSNR_FFT);
    let bands = |samples: &[f64]| -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); FWSNR_FFT];
        for (n, s) in samples.iter().enumerate() {
            buf[n] = Complex::new(s * window[n], 0.0);
        }
        fft.process(&mut buf);
        (0..FWSNR_BANDS)
            .map(|b| fb[b * n_freqs..(b + 1) * n_freqs].iter().zip(&buf).map(|(w, c)| w * c.norm()).sum())
            .collect()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + flen <= len {
        let x = bands(&target.samples[start..start + flen]);
        let y = bands(&converted.samples[start..start + flen]);
        if let Some(v) = fwsnr_frame(&x, &y) {
            total += v;
            count += 1;
        }
        start += hop;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("target is silent in every frame".into()));
    }
    Ok(total / count as f64)
}

/// RMSE of natural-log F0 over DTW-aligned frames where the target is voiced.
///
/// Unvoiced frames take the value ln(60 Hz) both for alignment and when an
/// unvoiced converted frame is paired with a voiced target frame.
pub fn f0_rmse_log(target: &F0Track, converted: &F0Track) -> Result<f64> {
    if target.is_empty() || converted.is_empty() {
        return Err(Error::Contract("f0_rmse_log needs non-empty tracks".into()));
    }
    if target.voiced_count() == 0 {
        return Err(Error::UndefinedMetric("target has no voiced frames".into()));
    }
    let floor = F0_MIN_HZ.ln();
    let log_track = |t: &F0Track| -> Vec<f64> {
        t.f0.iter().zip(&t.voiced).map(|(&f, &v)| if v { f.ln() } else { floor }).collect()
    };
    let (a, b) = (log_track(target), log_track(converted));
    let path = dtw_align(&a, &b, |x, y| (x - y).abs())?;
    let (mut sum, mut n) = (0.0, 0usize);
    for &(i, j) in &path.pairs {
        if target.voiced[i] {
            sum += (b[j] - a[i]).powi(2);
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}
