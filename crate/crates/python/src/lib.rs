//! Python bindings: the tensor regression model, the full decoder, feature
//! extraction and the metrics. Tensors cross the boundary as flat
//! row-major lists plus a shape.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rew_mslm::config::SessionConfig;
use rew_mslm::experiment::{new_decoder, run_experiment, Phases};
use rew_mslm::features::{CcwtExtractor, FeatureConfig, RawWindow};
use rew_mslm::io::ModelArchive;
use rew_mslm::metrics::{self, ConfusionMatrix, LatencyParams};
use rew_mslm::mslm::{DecodeResult, MslmDecoder};
use rew_mslm::npls::NplsModelSet;
use rew_mslm::sim::session::Phase;
use rew_mslm::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numeric(m) => PyRuntimeError::new_err(format!("numeric error: {m}")),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape.to_vec(), data).map_err(to_py)
}

fn tensors(shape: &[usize], rows: Vec<Vec<f64>>) -> PyResult<Vec<Tensor>> {
    rows.into_iter().map(|r| tensor(shape, r)).collect()
}

fn result_dict<'py>(py: Python<'py>, r: &DecodeResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("y_hat", r.y_hat.clone())?;
    d.set_item("gamma", r.gamma.clone())?;
    d.set_item("state", r.state)?;
    d.set_item("posterior", r.posterior.clone())?;
    Ok(d)
}

/// Recursive tensor regression with a family of latent dimensions.
#[pyclass(name = "NplsModel")]
struct PyNpls {
    inner: NplsModelSet,
}

#[pymethods]
impl PyNpls {
    #[new]
    #[pyo3(signature = (x_shape, y_shape, f_max = 10, forgetting = 1.0))]
    fn new(x_shape: Vec<usize>, y_shape: Vec<usize>, f_max: usize, forgetting: f64) -> PyResult<Self> {
        Ok(Self { inner: NplsModelSet::new(&x_shape, &y_shape, f_max, forgetting).map_err(to_py)? })
    }

    /// Scores the current models on the block and returns the selected f.
    fn rv_select(&mut self, xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> PyResult<usize> {
        let x = tensors(&self.inner.x_shape().to_vec(), xs)?;
        let y = tensors(&self.inner.y_shape().to_vec(), ys)?;
        self.inner.rv_select(&x, &y).map_err(to_py)
    }

    fn update(&mut self, xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> PyResult<()> {
        let x = tensors(&self.inner.x_shape().to_vec(), xs)?;
        let y = tensors(&self.inner.y_shape().to_vec(), ys)?;
        self.inner.update(&x, &y).map_err(to_py)
    }

    #[pyo3(signature = (x, f = None))]
    fn predict(&self, x: Vec<f64>, f: Option<usize>) -> PyResult<Vec<f64>> {
        let x = tensor(self.inner.x_shape(), x)?;
        Ok(self.inner.predict(&x, f).map_err(to_py)?.into_data())
    }

    #[getter]
    fn f_star(&self) -> usize {
        self.inner.f_star()
    }

    #[getter]
    fn val_error(&self) -> Vec<f64> {
        self.inner.val_error().to_vec()
    }
}

/// The mixture-of-experts decoder with HMM gating.
#[pyclass(name = "Decoder")]
struct PyDecoder {
    inner: MslmDecoder,
    config: SessionConfig,
}

#[pymethods]
impl PyDecoder {
    /// Zero-initialized decoder for a preset (`standard`, `noisy`,
    /// `five_state`) or a TOML configuration string.
    #[new]
    #[pyo3(signature = (preset = "standard", config_toml = None))]
    fn new(preset: &str, config_toml: Option<&str>) -> PyResult<Self> {
        let config = match config_toml {
            Some(src) => SessionConfig::from_toml_str(src),
            None => SessionConfig::preset(preset),
        }
        .map_err(to_py)?;
        Ok(Self { inner: new_decoder(&config).map_err(to_py)?, config })
    }

    /// Loads a model archive; the fingerprint is checked against the
    /// preset unless `allow_mismatch` is set.
    #[staticmethod]
    #[pyo3(signature = (path, preset = "standard", allow_mismatch = false))]
    fn load(path: &str, preset: &str, allow_mismatch: bool) -> PyResult<Self> {
        let config = SessionConfig::preset(preset).map_err(to_py)?;
        let archive = ModelArchive::load(path.as_ref()).map_err(to_py)?;
        archive.check_fingerprint(&config, allow_mismatch).map_err(to_py)?;
        Ok(Self { inner: archive.decoder, config })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        ModelArchive::new(self.inner.clone(), &self.config, 0).save(path.as_ref()).map_err(to_py)
    }

    #[getter]
    fn x_shape(&self) -> Vec<usize> {
        self.inner.x_shape().to_vec()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn updates(&self) -> u64 {
        self.inner.updates()
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.inner.gating().gamma().to_vec()
    }

    #[getter]
    fn transition(&self) -> Vec<Vec<f64>> {
        self.inner.gating().transition().to_vec()
    }

    fn reset_belief(&mut self) {
        self.inner.gating_mut().reset_belief();
    }

    /// One decode tick on a flat feature tensor.
    fn decode<'py>(&mut self, py: Python<'py>, x: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let x = tensor(&self.inner.x_shape().to_vec(), x)?;
        let r = self.inner.decode(&x).map_err(to_py)?;
        result_dict(py, &r)
    }

    /// One calibration update on an aligned block.
    fn calibrate(&mut self, xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>, zs: Vec<usize>) -> PyResult<()> {
        let x = tensors(&self.inner.x_shape().to_vec(), xs)?;
        self.inner.calibrate_update(&x, &ys, &zs).map_err(to_py)
    }
}

/// CCWT features of one window given as `frames[sample][channel]`.
/// Returns `(shape, flat_data)` with shape `(t_dec, n_freqs, n_channels)`.
#[pyfunction]
#[pyo3(signature = (frames, sample_rate, freqs, t_dec, morlet_cycles = 7.0))]
fn ccwt_features(
    frames: Vec<Vec<f64>>,
    sample_rate: f64,
    freqs: Vec<f64>,
    t_dec: usize,
    morlet_cycles: f64,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let n_channels = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|f| f.len() != n_channels) {
        return Err(PyValueError::new_err("all frames must have the same number of channels"));
    }
    let cfg = FeatureConfig {
        sample_rate,
        n_channels,
        freqs,
        epoch_s: frames.len() as f64 / sample_rate,
        slide_s: 1.0 / sample_rate,
        t_dec,
        morlet_cycles,
    };
    let window = RawWindow { n_samples: frames.len(), n_channels, data: frames.concat() };
    let x = CcwtExtractor::new(&cfg).and_then(|e| e.features(&window)).map_err(to_py)?;
    Ok((x.shape().to_vec(), x.into_data()))
}

/// Macro one-vs-all accuracy and F-score of a confusion matrix
/// (`counts[true][decoded]`).
#[pyfunction]
fn accuracy_fscore(counts: Vec<Vec<u64>>) -> PyResult<(f64, f64)> {
    let cm = ConfusionMatrix::new(counts).map_err(to_py)?;
    metrics::accuracy_fscore(&cm).map_err(to_py)
}

/// Error-block rate (per minute) and mean duration (s) after excluding
/// transition latencies.
#[pyfunction]
#[pyo3(signature = (instructed, decoded, tick_s = 0.1))]
fn error_blocks(instructed: Vec<usize>, decoded: Vec<usize>, tick_s: f64) -> PyResult<(f64, f64)> {
    let lat = metrics::latency_analysis(&instructed, &decoded, tick_s, &LatencyParams::default()).map_err(to_py)?;
    let eb = metrics::error_blocks(&instructed, &decoded, &lat.excluded, tick_s).map_err(to_py)?;
    Ok((eb.rate_per_min, eb.mean_duration_s))
}

#[pyfunction]
fn cos_sim(y: Vec<Vec<f64>>, y_hat: Vec<Vec<f64>>) -> PyResult<f64> {
    if y.len() != y_hat.len() {
        return Err(PyValueError::new_err("y and y_hat differ in length"));
    }
    let pairs = y.iter().zip(&y_hat).map(|(a, b)| (a.as_slice(), b.as_slice()));
    Ok(metrics::cos_sim(pairs).map_err(to_py)?.0)
}

/// Runs a full simulated experiment and returns the per-session test
/// reports as a JSON string.
#[pyfunction]
#[pyo3(signature = (preset = "standard", config_toml = None))]
fn simulate_reports(py: Python<'_>, preset: &str, config_toml: Option<&str>) -> PyResult<String> {
    let cfg = match config_toml {
        Some(src) => SessionConfig::from_toml_str(src),
        None => SessionConfig::preset(preset),
    }
    .map_err(to_py)?;
    let reports = py
        .detach(|| {
            let out = run_experiment(&cfg, None, Phases::Both)?;
            out.logs
                .iter()
                .map(|l| metrics::evaluate(l, &cfg.sim.layout, Phase::Test, &LatencyParams::default()))
                .collect::<rew_mslm::Result<Vec<_>>>()
        })
        .map_err(to_py)?;
    serde_json::to_string(&reports).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "rew_mslm")]
pub fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNpls>()?;
    m.add_class::<PyDecoder>()?;
    m.add_function(wrap_pyfunction!(ccwt_features, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_fscore, m)?)?;
    m.add_function(wrap_pyfunction!(error_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(cos_sim, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_reports, m)?)?;
    Ok(())
}
