//! Training data: temporal masks, segment sampling and manifests.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::dsp::{mel_frame_count, mel_spectrogram, AudioBuffer, MelSpectrogram};
use crate::error::{Error, Result};
use crate::{HOP_LENGTH, MEL_BINS};

/// A `bins × frames` binary mask whose zero columns form one contiguous run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalMask {
    bins: usize,
    frames: usize,
    start: usize,
    len: usize,
}

impl TemporalMask {
    /// The all-ones mask.
    pub fn ones(bins: usize, frames: usize) -> Self {
        TemporalMask { bins, frames, start: 0, len: 0 }
    }

    /// Zeroes columns `[start, start + len)`.
    pub fn with_span(bins: usize, frames: usize, start: usize, len: usize) -> Result<Self> {
        if start + len > frames {
            return Err(Error::dim(format!("mask span {start}+{len} exceeds {frames} frames")));
        }
        let start = if len == 0 { 0 } else { start };
        Ok(TemporalMask { bins, frames, start, len })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `(start_frame, length)` of the zeroed run.
    pub fn masked_span(&self) -> (usize, usize) {
        (self.start, self.len)
    }

    pub fn column_is_masked(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.start + self.len
    }

    /// Dense row-major `bins × frames` values.
    pub fn to_values(&self) -> Vec<f64> {
        let row: Vec<f64> = (0..self.frames).map(|t| if self.column_is_masked(t) { 0.0 } else { 1.0 }).collect();
        row.repeat(self.bins)
    }
}

/// Draws `n` uniformly from `0..=max_mask_frames`, then a uniform start.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, max_mask_frames: usize, rng: &mut R) -> Result<TemporalMask> {
    if max_mask_frames > frames {
        return Err(Error::Config(format!("max_mask_frames {max_mask_frames} exceeds {frames} frames")));
    }
    let n = rng.gen_range(0..=max_mask_frames);
    let start = rng.gen_range(0..=frames - n);
    TemporalMask::with_span(MEL_BINS, frames, start, n)
}

pub fn apply_mask(s: &MelSpectrogram, m: &TemporalMask) -> Result<MelSpectrogram> {
    if s.shape() != [m.bins, m.frames] {
        return Err(Error::dim(format!("mel {:?} vs mask {:?}", s.shape(), [m.bins, m.frames])));
    }
    let values = s
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| if m.column_is_masked(i % m.frames) { 0.0 } else { v })
        .collect();
    MelSpectrogram::new(s.bins(), s.frames(), values)
}

/// One training example: a mel window, its masked copy and the aligned audio.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSegment {
    pub mel: MelSpectrogram,
    pub masked: MelSpectrogram,
    pub mask: TemporalMask,
    /// `frames × 256` samples starting at `offset × 256`.
    pub waveform: Vec<f64>,
    pub utterance: usize,
    pub offset: usize,
}

/// Utterances with cached mel-spectrograms, ready for segment sampling.
#[derive(Debug, Clone)]
pub struct UtterancePool {
    audio: Vec<AudioBuffer>,
    mels: Vec<MelSpectrogram>,
    frames: usize,
}

impl UtterancePool {
    /// Keeps utterances long enough for a `frames`-frame segment and logs a
    /// warning for every one skipped.
    pub fn new(utterances: Vec<AudioBuffer>, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Config("segment length must be positive".into()));
        }
        let mut audio = Vec::new();
        let mut mels = Vec::new();
        for (i, u) in utterances.into_iter().enumerate() {
            if u.len() < frames * HOP_LENGTH {
                log::warn!("utterance {i}: {} samples is shorter than one {frames}-frame segment, skipped", u.len());
                continue;
            }
            match mel_spectrogram(&u) {
                Ok(m) => {
                    mels.push(m);
                    audio.push(u);
                }
                Err(e) => log::warn!("utterance {i}: {e}, skipped"),
            }
        }
        if audio.is_empty() {
            return Err(Error::Data("no usable utterances in pool".into()));
        }
        Ok(UtterancePool { audio, mels, frames })
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn segment_frames(&self) -> usize {
        self.frames
    }

    pub fn utterances(&self) -> &[AudioBuffer] {
        &self.audio
    }

    pub fn mels(&self) -> &[MelSpectrogram] {
        &self.mels
    }

    /// Number of valid segment start frames in utterance `i`.
    fn offsets(&self, i: usize) -> usize {
        self.audio[i].len() / HOP_LENGTH - self.frames + 1
    }

    /// Non-overlapping segments across the pool; drives the epoch length.
    pub fn segments_per_epoch(&self) -> usize {
        self.mels.iter().map(|m| m.frames() / self.frames).sum()
    }

    pub fn segment(&self, utterance: usize, offset: usize, mask: TemporalMask) -> Result<TrainSegment> {
        if utterance >= self.len() || offset >= self.offsets(utterance) {
            return Err(Error::Data(format!("no segment at utterance {utterance}, offset {offset}")));
        }
        let mel = self.mels[utterance].slice_frames(offset, self.frames)?;
        let masked = apply_mask(&mel, &mask)?;
        let start = offset * HOP_LENGTH;
        let waveform = self.audio[utterance].samples[start..start + self.frames * HOP_LENGTH].to_vec();
        Ok(TrainSegment { mel, masked, mask, waveform, utterance, offset })
    }

    /// `batch_size` segments, each with its own utterance, offset and mask.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        max_mask_frames: usize,
        rng: &mut R,
    ) -> Result<Vec<TrainSegment>> {
        (0..batch_size)
            .map(|_| {
                let u = rng.gen_range(0..self.len());
                let offset = rng.gen_range(0..self.offsets(u));
                let mask = sample_mask(self.frames, max_mask_frames, rng)?;
                self.segment(u, offset, mask)
            })
            .collect()
    }
}

/// One-shot batch assembly from raw utterances.
pub fn make_batch<R: Rng + ?Sized>(
    utterances: &[AudioBuffer],
    batch_size: usize,
    frames: usize,
    max_mask_frames: usize,
    rng: &mut R,
) -> Result<Vec<TrainSegment>> {
    UtterancePool::new(utterances.to_vec(), frames)?.sample_batch(batch_size, max_mask_frames, rng)
}

/// Frame count the mel transform yields for an utterance of `len` samples.
pub fn utterance_frames(len: usize) -> usize {
    mel_frame_count(len)
}

/// Reads a manifest: one WAV path per line, blank lines and `#` comments
/// ignored. Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(parse_manifest(&text, path.parent().unwrap_or(Path::new(""))))
}

pub fn parse_manifest(text: &str, base: &Path) -> Vec<PathBuf> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::SAMPLE_RATE;

    fn chirp(len: usize, seed: f64) -> AudioBuffer {
        let s = (0..len).map(|i| 0.5 * (i as f64 * (0.01 + seed * 1e-3) + 1e-7 * (i * i) as f64).sin()).collect();
        AudioBuffer::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn zero_max_gives_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let m = sample_mask(64, 0, &mut rng).unwrap();
            assert_eq!(m.masked_span().1, 0);
            assert!(m.to_values().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn full_length_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = (0..2000).map(|_| sample_mask(64, 64, &mut rng).unwrap()).find(|m| m.masked_span().1 == 64).unwrap();
        assert_eq!(m.masked_span(), (0, 64));
        assert!(m.to_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_above_frames_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_mask(10, 11, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn mask_lengths_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 26];
        for _ in 0..10_000 {
            let m = sample_mask(64, 25, &mut rng).unwrap();
            let vals = m.to_values();
            for row in vals.chunks(64) {
                assert_eq!(row, &vals[..64]);
            }
            let zeros: Vec<usize> = (0..64).filter(|&t| vals[t] == 0.0).collect();
            let (start, n) = m.masked_span();
            assert!(n <= 25);
            assert_eq!(zeros.len(), n);
            if n > 0 {
                assert_eq!(zeros, (start..start + n).collect::<Vec<_>>());
            }
            counts[n] += 1;
        }
        let expected = 10_000.0 / 26.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 25 degrees of freedom: mean 25, sd sqrt(50); 3 sd above the mean
        assert!(chi2 < 25.0 + 3.0 * 50f64.sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn apply_mask_cases() {
        let vals: Vec<f64> = (0..80 * 40).map(|i| i as f64 * 0.1 - 3.0).collect();
        let s = MelSpectrogram::new(80, 40, vals).unwrap();
        assert_eq!(apply_mask(&s, &TemporalMask::ones(80, 40)).unwrap(), s);
        let zero = apply_mask(&s, &TemporalMask::with_span(80, 40, 0, 40).unwrap()).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let m = TemporalMask::with_span(80, 40, 10, 25).unwrap();
        let out = apply_mask(&s, &m).unwrap();
        for b in 0..80 {
            for t in 0..40 {
                let expected = if (10..35).contains(&t) { 0.0 } else { s.get(b, t) };
                assert_eq!(out.get(b, t).to_bits(), expected.to_bits());
            }
        }
        assert_eq!(apply_mask(&out, &m).unwrap(), out);
        assert!(apply_mask(&s, &TemporalMask::ones(80, 39)).is_err());
    }

    #[test]
    fn batch_shapes_and_alignment() {
        let utts = vec![chirp(30_000, 1.0), chirp(25_000, 2.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = make_batch(&utts, 8, 64, 25, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        for seg in &batch {
            assert_eq!(seg.mel.shape(), [80, 64]);
            assert_eq!(seg.waveform.len(), 16_384);
            let src = &utts[seg.utterance].samples;
            assert_eq!(&src[seg.offset * 256..seg.offset * 256 + 16_384], &seg.waveform[..]);
            assert_eq!(seg.masked, apply_mask(&seg.mel, &seg.mask).unwrap());
            let full = mel_spectrogram(&utts[seg.utterance]).unwrap();
            assert_eq!(seg.mel, full.slice_frames(seg.offset, 64).unwrap());
        }
    }

    #[test]
    fn single_utterance_offsets_vary() {
        let utts = vec![chirp(40_000, 3.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = make_batch(&utts, 8, 64, 25, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.utterance == 0));
        let first = batch[0].offset;
        assert!(batch.iter().any(|s| s.offset != first));
    }

    #[test]
    fn batches_are_reproducible() {
        let utts = vec![chirp(30_000, 1.0), chirp(20_000, 4.0)];
        let a = make_batch(&utts, 4, 32, 25, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = make_batch(&utts, 4, 32, 25, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_utterances_are_skipped() {
        let utts = vec![chirp(5_000, 1.0), chirp(20_000, 2.0)];
        let pool = UtterancePool::new(utts, 64).unwrap();
        assert_eq!(pool.len(), 1);
        let err = UtterancePool::new(vec![chirp(5_000, 1.0)], 64).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn manifest_parsing() {
        let text = "# speaker x\na.wav\n\n  /abs/b.wav  \n#c.wav\nsub/d.wav\n";
        let paths = parse_manifest(text, Path::new("/data"));
        assert_eq!(
            paths,
            [PathBuf::from("/data/a.wav"), PathBuf::from("/abs/b.wav"), PathBuf::from("/data/sub/d.wav")]
        );
    }
}
