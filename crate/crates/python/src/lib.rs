//! Python module `ccdm`: noise schedules, metrics, synthetic data, the run
//! harness and a trained-model sampler.

use std::path::PathBuf;

use ccdm::config::{Precision, RunConfig as CoreConfig};
use ccdm::data::{ring_coefficients, synth_generate, SynthSpec, Wave};
use ccdm::denoiser::Denoiser;
use ccdm::diffusion::NoiseSchedule as CoreSchedule;
use ccdm::evaluation::{self, assemble_ensemble, ForecastEnsemble};
use ccdm::harness::{self, SweepAxis};
use ccdm::{Error, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Contract(_) | Error::Fingerprint { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Row-major nested list to a 2-D tensor.
pub fn matrix(rows: &[Vec<f64>]) -> ccdm::Result<Tensor<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension("rows have different lengths".into()));
    }
    Tensor::new(vec![r, c], rows.concat())
}

pub fn nested(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn to_py<'py, S: serde::Serialize>(py: Python<'py>, v: &S) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

/// Quadratic variance schedule and its derived tables.
#[pyclass(frozen)]
struct NoiseSchedule(CoreSchedule);

#[pymethods]
impl NoiseSchedule {
    #[new]
    fn new(beta_start: f64, beta_end: f64, steps: usize) -> PyResult<Self> {
        CoreSchedule::quadratic(beta_start, beta_end, steps).map(Self).map_err(py_err)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.0.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.0.alpha_bars().to_vec()
    }

    #[getter]
    fn beta_tildes(&self) -> Vec<f64> {
        self.0.beta_tildes().to_vec()
    }

    /// Per-step weights of the forecasting-error bound.
    #[getter]
    fn weights(&self) -> Vec<f64> {
        (1..=self.0.steps()).map(|k| self.0.weight_at(k)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "NoiseSchedule(beta_start={}, beta_end={}, steps={})",
            self.0.betas()[0],
            self.0.betas()[self.0.steps() - 1],
            self.0.steps()
        )
    }
}

/// CRPS of an ensemble (`samples[s][t][d]`) against `truth[t][d]`.
#[pyfunction]
fn crps(samples: Vec<Vec<Vec<f64>>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    let ens = samples
        .iter()
        .map(|s| matrix(s))
        .collect::<ccdm::Result<Vec<_>>>()
        .and_then(ForecastEnsemble::from_samples)
        .map_err(py_err)?;
    evaluation::crps(&ens, &matrix(&truth).map_err(py_err)?).map_err(py_err)
}

/// CRPS of scalar samples against a scalar observation.
#[pyfunction]
fn crps_scalar(mut samples: Vec<f64>, truth: f64) -> PyResult<f64> {
    if samples.is_empty() || samples.iter().any(|v| v.is_nan()) {
        return Err(PyValueError::new_err("samples must be non-empty and free of NaN"));
    }
    samples.sort_by(f64::total_cmp);
    Ok(evaluation::crps_sorted(&samples, truth))
}

#[pyfunction]
fn mse(forecast: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    evaluation::mse(&matrix(&forecast).map_err(py_err)?, &matrix(&truth).map_err(py_err)?).map_err(py_err)
}

/// First-order vector autoregression with ring coupling; `[length][channels]`.
#[pyfunction]
#[pyo3(signature = (channels, length, seed, persistence=0.5, coupling=0.4, noise_std=1.0, burn_in=200))]
fn synth_var(
    channels: usize,
    length: usize,
    seed: u64,
    persistence: f64,
    coupling: f64,
    noise_std: f64,
    burn_in: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let spec = SynthSpec::Var {
        coefficients: ring_coefficients(channels, persistence, coupling),
        noise_std,
        burn_in,
    };
    let frame = synth_generate(&spec, channels, length, seed).map_err(py_err)?;
    Ok(nested(&frame.values))
}

/// Sum of `(period, amplitude)` waves per channel plus correlated noise.
#[pyfunction]
#[pyo3(signature = (channels, length, seed, waves, noise_std=0.1, noise_correlation=0.0))]
fn synth_sinusoid(
    channels: usize,
    length: usize,
    seed: u64,
    waves: Vec<(f64, f64)>,
    noise_std: f64,
    noise_correlation: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let spec = SynthSpec::Sinusoid {
        waves: waves
            .into_iter()
            .map(|(period, amplitude)| Wave { period, amplitude })
            .collect(),
        noise_std,
        noise_correlation,
    };
    let frame = synth_generate(&spec, channels, length, seed).map_err(py_err)?;
    Ok(nested(&frame.values))
}

/// A validated run configuration.
#[pyclass]
struct RunConfig(CoreConfig);

#[pymethods]
impl RunConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        CoreConfig::from_toml_str(text).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_path(path: PathBuf) -> PyResult<Self> {
        CoreConfig::from_path(&path).map(Self).map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.0.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.0.output_dir = dir;
    }

    fn fingerprint(&self) -> PyResult<String> {
        self.0.fingerprint().map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }
}

#[pyfunction]
fn train<'py>(py: Python<'py>, config: &RunConfig) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| harness::cmd_train(&config.0)).map_err(py_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint=None))]
fn evaluate<'py>(py: Python<'py>, config: &RunConfig, checkpoint: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let r = py
        .detach(|| harness::cmd_evaluate(&config.0, checkpoint.as_deref()))
        .map_err(py_err)?;
    to_py(py, &r)
}

#[pyfunction]
fn ablate<'py>(py: Python<'py>, config: &RunConfig) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| harness::cmd_ablate(&config.0)).map_err(py_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (config, axis, values, parallel=false))]
fn sweep<'py>(py: Python<'py>, config: &RunConfig, axis: &str, values: Vec<f64>, parallel: bool) -> PyResult<Bound<'py, PyAny>> {
    let axis = match axis {
        "lambda" => SweepAxis::Lambda,
        "negatives" => SweepAxis::Negatives,
        "tau" => SweepAxis::Tau,
        other => return Err(PyValueError::new_err(format!("unknown sweep axis {other:?}"))),
    };
    let r = py
        .detach(|| harness::cmd_sweep(&config.0, axis, &values, parallel))
        .map_err(py_err)?;
    to_py(py, &r)
}

enum Model {
    F32(Denoiser<f32>),
    F64(Denoiser<f64>),
}

/// A trained denoiser paired with its schedule, for drawing forecasts.
#[pyclass(frozen)]
struct Forecaster {
    model: Model,
    schedule: CoreSchedule,
}

#[pymethods]
impl Forecaster {
    #[staticmethod]
    fn load(config: &RunConfig, checkpoint: PathBuf) -> PyResult<Self> {
        let schedule = config.0.schedule.build().map_err(py_err)?;
        let model = match config.0.precision {
            Precision::F32 => Model::F32(harness::load_model(&config.0, &checkpoint).map_err(py_err)?),
            Precision::F64 => Model::F64(harness::load_model(&config.0, &checkpoint).map_err(py_err)?),
        };
        Ok(Self { model, schedule })
    }

    #[getter]
    fn param_count(&self) -> usize {
        match &self.model {
            Model::F32(m) => m.config().param_count(),
            Model::F64(m) => m.config().param_count(),
        }
    }

    /// `samples` forecasts `[samples][horizon][channels]` for lookback `x[lookback][channels]`.
    fn sample(&self, py: Python<'_>, x: Vec<Vec<f64>>, samples: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let x = matrix(&x).map_err(py_err)?;
        let ens = py
            .detach(|| match &self.model {
                Model::F32(m) => assemble_ensemble(&x.cast::<f32>(), m, &self.schedule, samples, seed),
                Model::F64(m) => assemble_ensemble(&x, m, &self.schedule, samples, seed),
            })
            .map_err(py_err)?;
        Ok(ens.samples().iter().map(nested).collect())
    }
}

#[pymodule]
#[pyo3(name = "ccdm")]
fn ccdm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", harness::VERSION)?;
    m.add_class::<NoiseSchedule>()?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Forecaster>()?;
    m.add_function(wrap_pyfunction!(crps, m)?)?;
    m.add_function(wrap_pyfunction!(crps_scalar, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(synth_var, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sinusoid, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
