use super::{analysis_center, analysis_frame_count, AudioBuffer, ANALYSIS_FRAME_PERIOD};
use crate::error::Result;
use crate::SAMPLE_RATE;

pub const F0_MIN_HZ: f64 = 60.0;
pub const F0_MAX_HZ: f64 = 500.0;

const WINDOW: usize = 1024;
const PERIODICITY_THRESHOLD: f64 = 0.45;
/// -40 dBFS
const RMS_THRESHOLD: f64 = 0.01;
/// Lags within this fraction of the best correlation count as candidates;
/// the shortest one wins, which avoids picking sub-harmonics.
const CANDIDATE_RATIO: f64 = 0.9;

/// Per-frame fundamental frequency at a fixed 5 ms frame period.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    /// Hz, 0 where unvoiced.
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    pub frame_period: f64,
}

impl F0Track {
    /// Builds a track from Hz values; frames with `f0 > 0` are voiced.
    pub fn from_hz(f0: Vec<f64>) -> Self {
        let f0: Vec<f64> = f0.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
        let voiced = f0.iter().map(|&v| v > 0.0).collect();
        F0Track { f0, voiced, frame_period: ANALYSIS_FRAME_PERIOD }
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }
}

/// Normalised-autocorrelation pitch tracker over 60–500 Hz.
///
/// A frame is voiced when its best normalised correlation reaches 0.45 and
/// its RMS is at least -40 dBFS.
pub fn estimate_f0(buf: &AudioBuffer) -> Result<F0Track> {
    buf.require_rate(SAMPLE_RATE)?;
    let sr = buf.sample_rate as f64;
    let lag_min = (sr / F0_MAX_HZ).floor() as usize;
    let lag_max = (sr / F0_MIN_HZ).ceil() as usize;
    let n_frames = analysis_frame_count(buf.len(), buf.sample_rate);
    let mut seg = vec![0.0; WINDOW + lag_max + 1];
    let mut corr = vec![0.0; lag_max + 2];
    let mut f0 = Vec::with_capacity(n_frames);

    for i in 0..n_frames {
        let start = analysis_center(i, buf.sample_rate) as isize - (WINDOW / 2) as isize;
        for (n, v) in seg.iter_mut().enumerate() {
            let j = start + n as isize;
            *v = if j >= 0 && (j as usize) < buf.len() { buf.samples[j as usize] } else { 0.0 };
        }
        let head = &seg[..WINDOW];
        let e0: f64 = head.iter().map(|x| x * x).sum();
        let rms = (e0 / WINDOW as f64).sqrt();
        if rms < RMS_THRESHOLD {
            f0.push(0.0);
            continue;
        }
        // energy of the lagged window, updated incrementally
        let mut e_lag: f64 = seg[lag_min - 1..lag_min - 1 + WINDOW].iter().map(|x| x * x).sum();
        for lag in lag_min - 1..=lag_max + 1 {
            if lag > lag_min - 1 {
                e_lag += seg[lag + WINDOW - 1].powi(2) - seg[lag - 1].powi(2);
            }
            let dot: f64 = head.iter().zip(&seg[lag..lag + WINDOW]).map(|(a, b)| a * b).sum();
            let denom = (e0 * e_lag.max(0.0)).sqrt();
            corr[lag] = if denom > 0.0 { dot / denom } else { 0.0 };
        }
        let best = (lag_min..=lag_max).map(|l| corr[l]).fold(f64::NEG_INFINITY, f64::max);
        let lag = (lag_min..=lag_max)
            .find(|&l| corr[l] >= CANDIDATE_RATIO * best && corr[l] >= corr[l - 1] && corr[l] >= corr[l + 1])
            .unwrap_or_else(|| (lag_min..=lag_max).max_by(|&a, &b| corr[a].total_cmp(&corr[b])).unwrap());
        if corr[lag] < PERIODICITY_THRESHOLD {
            f0.push(0.0);
            continue;
        }
        let (a, b, c) = (corr[lag - 1], corr[lag], corr[lag + 1]);
        let curvature = a - 2.0 * b + c;
        let shift = if curvature < 0.0 { (0.5 * (a - c) / curvature).clamp(-0.5, 0.5) } else { 0.0 };
        f0.push(sr / (lag as f64 + shift));
    }
    Ok(F0Track::from_hz(f0))
}
