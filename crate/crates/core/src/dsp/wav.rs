use std::io::{Read, Seek, Write};
use std::path::Path;

use super::AudioBuffer;
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::Io(e),
        hound::Error::FormatError(msg) => Error::Parse(format!("malformed WAV: {msg}")),
        hound::Error::TooWide => Error::UnsupportedFormat("sample width too wide".into()),
        hound::Error::UnfinishedSample => Error::Parse("truncated sample data".into()),
        hound::Error::Unsupported => Error::UnsupportedFormat("only 16-bit integer PCM is supported".into()),
        hound::Error::InvalidSampleFormat => Error::UnsupportedFormat("invalid sample format".into()),
    }
}

/// Reads 16-bit PCM RIFF/WAVE; multi-channel input keeps the first channel.
pub fn read_wav<R: Read>(reader: R) -> Result<AudioBuffer> {
    let reader = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} with {} bits per sample",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let mut samples = Vec::with_capacity(reader.len() as usize / channels);
    for (i, s) in reader.into_samples::<i16>().enumerate() {
        let s = s.map_err(map_hound)?;
        if i % channels == 0 {
            samples.push(s as f64 / PCM_SCALE);
        }
    }
    AudioBuffer::new(samples, spec.sample_rate)
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_wav(std::io::BufReader::new(file))
}

fn to_pcm(x: f64) -> i16 {
    (x * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Writes mono 16-bit PCM, clipping to the representable range.
pub fn write_wav<W: Write + Seek>(writer: W, buf: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(writer, spec).map_err(map_hound)?;
    let mut w16 = w.get_i16_writer(buf.samples.len() as u32);
    for &x in &buf.samples {
        w16.write_sample(to_pcm(x));
    }
    w16.flush().map_err(map_hound)?;
    w.finalize().map_err(map_hound)
}

pub fn save_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    write_wav(std::io::BufWriter::new(file), buf)
}
