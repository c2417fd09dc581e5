//! Python bindings: STFT, BSS metrics, the volume protocol, checkpoint
//! inference and the command line.

use std::path::PathBuf;

use avss::audionet::Model;
use avss::dsp::{self, ChunkSpec, ComplexSpectrogram, Resolution, Waveform, CHUNK_SAMPLES, SAMPLE_RATE};
use avss::evaluation::compute_metrics_with;
use avss::mixer::volume_protocol as protocol;
use avss::visualnet::read_landmarks;
use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Planes = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn chunk_for(len: usize) -> PyResult<ChunkSpec> {
    if len == 0 || len % CHUNK_SAMPLES != 0 {
        return Err(PyValueError::new_err(format!("length {len} is not a positive multiple of {CHUNK_SAMPLES}")));
    }
    ChunkSpec::new(len / CHUNK_SAMPLES).map_err(value_err)
}

/// Full-resolution STFT of 16384 Hz audio; returns `(real, imag)` as
/// `[freq][time]` lists.
#[pyfunction]
fn stft(samples: Vec<f64>) -> PyResult<Planes> {
    let chunk = chunk_for(samples.len())?;
    let wave = Waveform::new(samples, SAMPLE_RATE).map_err(value_err)?;
    let spec = dsp::stft(&wave, chunk).map_err(value_err)?;
    let rows = |f: fn(&Complex64) -> f64| {
        spec.data.chunks(spec.n_time).map(|r| r.iter().map(f).collect()).collect()
    };
    Ok((rows(|c| c.re), rows(|c| c.im)))
}

#[pyfunction]
fn istft(real: Vec<Vec<f64>>, imag: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let n_time = real.first().map_or(0, Vec::len);
    if real.len() != imag.len() || real.iter().chain(&imag).any(|r| r.len() != n_time) {
        return Err(PyValueError::new_err("real and imag must be equal rectangular planes"));
    }
    let data = real.iter().flatten().zip(imag.iter().flatten()).map(|(&re, &im)| Complex64::new(re, im)).collect();
    let spec = ComplexSpectrogram::from_data(data, Resolution::Full512, n_time).map_err(value_err)?;
    let chunk = chunk_for(n_time * dsp::HOP_LEN)?;
    Ok(dsp::istft(&spec, chunk).map_err(value_err)?.samples)
}

/// SDR, SIR and SAR of `estimate` against `references[target_index]`.
#[pyfunction]
#[pyo3(signature = (estimate, references, target_index=0, filter_len=512))]
fn bss_eval<'py>(
    py: Python<'py>,
    estimate: Vec<f64>,
    references: Vec<Vec<f64>>,
    target_index: usize,
    filter_len: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let refs: Vec<&[f64]> = references.iter().map(Vec::as_slice).collect();
    let m = compute_metrics_with(&estimate, &refs, target_index, filter_len).map_err(value_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("sdr", m.sdr)?;
    d.set_item("sir", m.sir)?;
    d.set_item("sar", m.sar)?;
    d.set_item("capped", m.capped)?;
    d.set_item("regularized", m.regularized)?;
    Ok(d)
}

/// Rescales `sources` so the voice at `voice_index` sits at `alpha` times
/// the loudness of the rest.
#[pyfunction]
fn volume_protocol(sources: Vec<Vec<f64>>, voice_index: usize, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    let waves = sources
        .into_iter()
        .map(|s| Waveform::new(s, SAMPLE_RATE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let out = protocol(&waves, voice_index, alpha).map_err(value_err)?;
    Ok(out.into_iter().map(|w| w.samples).collect())
}

/// A trained checkpoint.
#[pyclass]
struct Separator {
    model: Model,
}

#[pymethods]
impl Separator {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        let (model, _) = Model::load(&checkpoint).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { model })
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.model.config().num_blocks
    }

    #[getter]
    fn base_channels(&self) -> usize {
        self.model.config().base_channels
    }

    #[getter]
    fn use_visual(&self) -> bool {
        self.model.config().use_visual
    }

    /// Target voice of `samples`, returned at the input rate and length.
    #[pyo3(signature = (samples, sample_rate=SAMPLE_RATE, landmarks=None))]
    fn separate(&self, py: Python<'_>, samples: Vec<f64>, sample_rate: u32, landmarks: Option<PathBuf>) -> PyResult<Vec<f64>> {
        let wave = Waveform::new(samples, sample_rate).map_err(value_err)?;
        let lm = landmarks.map(|p| read_landmarks(&p)).transpose().map_err(|e| PyIOError::new_err(e.to_string()))?;
        let out = py.allow_threads(|| avss::cli::separate_file(&self.model, &wave, lm.as_ref()));
        Ok(out.map_err(value_err)?.samples)
    }
}

/// Runs the `avss` command line; returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.allow_threads(|| avss::cli::run(std::iter::once("avss".to_string()).chain(args)))
}

#[pymodule]
fn avss_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    m.add("CHUNK_SAMPLES", CHUNK_SAMPLES)?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(istft, m)?)?;
    m.add_function(wrap_pyfunction!(bss_eval, m)?)?;
    m.add_function(wrap_pyfunction!(volume_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Separator>()?;
    Ok(())
}
