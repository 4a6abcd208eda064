//! Python module `wavecycle`: feature extraction, metrics and conversion with
//! trained checkpoints. Audio crosses the boundary as lists of floats in
//! [-1, 1].

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use wavecycle_core::dsp::{self, AudioBuffer, F0Track, McepSequence};
use wavecycle_core::metrics;
use wavecycle_core::train::{load_checkpoint, Direction, TrainConfig, TrainState};
use wavecycle_core::Error;

create_exception!(wavecycle, WavecycleError, pyo3::exceptions::PyException);
create_exception!(wavecycle, IncompatibleCheckpointError, WavecycleError);
create_exception!(wavecycle, UndefinedMetricError, WavecycleError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::IncompatibleCheckpoint(_) => IncompatibleCheckpointError::new_err(e.to_string()),
        Error::UndefinedMetric(_) => UndefinedMetricError::new_err(e.to_string()),
        Error::File { .. } | Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } => WavecycleError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn audio(samples: Vec<f64>, sample_rate: u32) -> PyResult<AudioBuffer> {
    AudioBuffer::new(samples, sample_rate).map_err(to_py)
}

/// Reads a 16-bit PCM WAV; returns `(samples, sample_rate)`.
#[pyfunction]
fn load_wav(path: PathBuf) -> PyResult<(Vec<f64>, u32)> {
    let buf = dsp::load_wav(path).map_err(to_py)?;
    Ok((buf.samples, buf.sample_rate))
}

/// Writes mono 16-bit PCM.
#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate = 22_050))]
fn save_wav(path: PathBuf, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    dsp::save_wav(path, &audio(samples, sample_rate)?).map_err(to_py)
}

/// Log-mel spectrogram as 80 rows of `len // 256 + 1` frames.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 22_050))]
fn mel_spectrogram(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let buf = dsp::resample(&audio(samples, sample_rate)?, wavecycle_core::SAMPLE_RATE).map_err(to_py)?;
    let mel = dsp::mel_spectrogram(&buf).map_err(to_py)?;
    Ok(mel.values().chunks(mel.frames()).map(<[f64]>::to_vec).collect())
}

/// F0 in Hz per 5 ms frame, 0 where unvoiced.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 22_050))]
fn estimate_f0(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<f64>> {
    Ok(dsp::estimate_f0(&audio(samples, sample_rate)?).map_err(to_py)?.f0)
}

/// Mel-cepstra c0..c34 per 5 ms frame.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 22_050))]
fn extract_mcep(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    Ok(dsp::extract_mcep(&audio(samples, sample_rate)?).map_err(to_py)?.frames)
}

/// Euclidean DTW; returns `(path, cost)`.
#[pyfunction]
fn dtw_align(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    if let Some(first) = a.first().or(b.first()) {
        if let Some(bad) = a.iter().chain(&b).find(|f| f.len() != first.len()) {
            return Err(PyValueError::new_err(format!("frame of length {} among frames of length {}", bad.len(), first.len())));
        }
    }
    let p = metrics::dtw_align(&a, &b, |x, y| metrics::euclidean(x, y)).map_err(to_py)?;
    Ok((p.pairs, p.cost))
}

/// Mel-cepstral distortion in dB between two c0..c34 sequences.
#[pyfunction]
fn mcd(target: Vec<Vec<f64>>, converted: Vec<Vec<f64>>) -> PyResult<f64> {
    let t = McepSequence::new(target).map_err(to_py)?;
    let c = McepSequence::new(converted).map_err(to_py)?;
    metrics::mcd(&t, &c).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (target, converted, sample_rate = 22_050))]
fn fwsnrseg(target: Vec<f64>, converted: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    metrics::fwsnrseg(&audio(target, sample_rate)?, &audio(converted, sample_rate)?).map_err(to_py)
}

/// RMSE between DTW-aligned natural-log F0 tracks given in Hz.
#[pyfunction]
fn f0_rmse_log(target_hz: Vec<f64>, converted_hz: Vec<f64>) -> PyResult<f64> {
    metrics::f0_rmse_log(&F0Track::from_hz(target_hz), &F0Track::from_hz(converted_hz)).map_err(to_py)
}

/// All three measures for one utterance pair, as a dict.
#[pyfunction]
#[pyo3(signature = (target, converted, sample_rate = 22_050))]
fn evaluate_pair<'py>(
    py: Python<'py>,
    target: Vec<f64>,
    converted: Vec<f64>,
    sample_rate: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let s = metrics::evaluate_pair("", &audio(target, sample_rate)?, &audio(converted, sample_rate)?).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mcd_db", s.mcd_db)?;
    d.set_item("fwsnrseg_db", s.fwsnrseg_db)?;
    d.set_item("rmse_logf0", s.rmse_logf0)?;
    Ok(d)
}

/// Preset config as TOML: `"desk"` or `"full"`.
#[pyfunction]
#[pyo3(signature = (preset = "desk"))]
fn default_config(preset: &str) -> PyResult<String> {
    match preset {
        "desk" => Ok(TrainConfig::desk().to_toml()),
        "full" => Ok(TrainConfig::full().to_toml()),
        other => Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
    }
}

/// Architecture hash and parameter counts of a TOML config.
#[pyfunction]
fn inspect_config<'py>(py: Python<'py>, toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrainConfig::from_toml(toml).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("architecture_hash", cfg.architecture_hash_hex())?;
    d.set_item("generator_params", cfg.generator_config().count_params())?;
    d.set_item("discriminator_params", cfg.discriminator.count_params())?;
    d.set_item("discriminators", if cfg.ablation.enable_adv2 { 4 } else { 2 })?;
    Ok(d)
}

/// A trained checkpoint, ready to convert.
#[pyclass(module = "wavecycle", frozen)]
struct Model {
    state: TrainState,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { state: load_checkpoint(&path).map_err(to_py)? })
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.state.iteration()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.state.num_params()
    }

    #[getter]
    fn architecture_hash(&self) -> String {
        self.state.config().architecture_hash_hex()
    }

    #[getter]
    fn config(&self) -> String {
        self.state.config().to_toml()
    }

    /// Converts with direction `"x2y"` or `"y2x"`; output is at 22 050 Hz,
    /// 256 samples per input mel frame.
    #[pyo3(signature = (samples, direction, sample_rate = 22_050))]
    fn convert(&self, py: Python<'_>, samples: Vec<f64>, direction: &str, sample_rate: u32) -> PyResult<Vec<f64>> {
        let dir: Direction = direction.parse().map_err(to_py)?;
        let input = audio(samples, sample_rate)?;
        let out = py.detach(|| self.state.convert(&input, dir)).map_err(to_py)?;
        Ok(out.samples)
    }

    fn __repr__(&self) -> String {
        format!("Model(iteration={}, params={})", self.state.iteration(), self.state.num_params())
    }
}

#[pymodule]
fn wavecycle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("SAMPLE_RATE", wavecycle_core::SAMPLE_RATE)?;
    m.add("HOP_LENGTH", wavecycle_core::HOP_LENGTH)?;
    m.add("WavecycleError", py.get_type::<WavecycleError>())?;
    m.add("IncompatibleCheckpointError", py.get_type::<IncompatibleCheckpointError>())?;
    m.add("UndefinedMetricError", py.get_type::<UndefinedMetricError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(save_wav, m)?)?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_f0, m)?)?;
    m.add_function(wrap_pyfunction!(extract_mcep, m)?)?;
    m.add_function(wrap_pyfunction!(dtw_align, m)?)?;
    m.add_function(wrap_pyfunction!(mcd, m)?)?;
    m.add_function(wrap_pyfunction!(fwsnrseg, m)?)?;
    m.add_function(wrap_pyfunction!(f0_rmse_log, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_config, m)?)?;
    Ok(())
}
