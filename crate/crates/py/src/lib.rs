//! Python bindings: GP sampling, model construction and evaluation, the
//! finite-difference solver, losses, training and evaluation.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pideeponet::cli::RunConfig;
use pideeponet::deeponet::{DeepOnet, DeepOnetConfig, Domain, QueryPoint};
use pideeponet::fdm::{solve_fdm, FdmConfig};
use pideeponet::gp::{GpConfig, GpSampler, SensorGrid, SourceFunction};
use pideeponet::physics::{total_loss, DiffusionFunction};
use pideeponet::pipeline::{self, io, Dataset, FunctionError};
use pideeponet::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::Version { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape { .. } | Error::Contract(_) | Error::Domain { .. } | Error::Margin { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn domain(horizon: f64, half_width: f64) -> PyResult<Domain> {
    Domain::new(horizon, half_width).map_err(py_err)
}

fn parse_config(config: &str) -> PyResult<RunConfig> {
    RunConfig::parse_str(config).map_err(py_err)
}

/// A source term sampled at uniformly spaced sensors.
#[pyclass(name = "Source", module = "pideeponet_py")]
#[derive(Clone)]
struct PySource {
    inner: SourceFunction,
}

#[pymethods]
impl PySource {
    #[new]
    #[pyo3(signature = (values, half_width = 1.0))]
    fn new(values: Vec<f64>, half_width: f64) -> PyResult<Self> {
        let grid = Arc::new(SensorGrid::uniform(values.len(), half_width).map_err(py_err)?);
        Ok(Self {
            inner: SourceFunction::new(grid, values).map_err(py_err)?,
        })
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.sensor_values().to_vec()
    }

    #[getter]
    fn sensors(&self) -> Vec<f64> {
        self.inner.grid().positions().to_vec()
    }

    fn __call__(&self, x: f64) -> PyResult<f64> {
        self.inner.eval(x).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.sensor_values().len()
    }
}

#[pyclass(name = "GpSampler", module = "pideeponet_py")]
struct PyGpSampler {
    inner: GpSampler,
}

#[pymethods]
impl PyGpSampler {
    #[new]
    #[pyo3(signature = (sensors = 100, half_width = 1.0, variance = 1.0, length_scale = 0.2))]
    fn new(sensors: usize, half_width: f64, variance: f64, length_scale: f64) -> PyResult<Self> {
        let grid = Arc::new(SensorGrid::uniform(sensors, half_width).map_err(py_err)?);
        let cfg = GpConfig {
            variance,
            length_scale,
            ..GpConfig::default()
        };
        Ok(Self {
            inner: GpSampler::new(grid, &cfg).map_err(py_err)?,
        })
    }

    /// Draw number `stream` of the sequence keyed by `seed`.
    fn sample(&self, seed: u64, stream: u64) -> PyResult<PySource> {
        Ok(PySource {
            inner: self.inner.sample(seed, stream).map_err(py_err)?,
        })
    }

    #[getter]
    fn jitter(&self) -> f64 {
        self.inner.factor().jitter
    }
}

#[pyclass(name = "Model", module = "pideeponet_py")]
#[derive(Clone)]
struct PyModel {
    inner: DeepOnet,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        sensors = 100,
        embedding_dim = 64,
        branch_hidden = vec![64, 64],
        trunk_hidden = vec![64, 64],
        activation = "relu",
        seed = 1,
        horizon = 1.0,
        half_width = 1.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        sensors: usize,
        embedding_dim: usize,
        branch_hidden: Vec<usize>,
        trunk_hidden: Vec<usize>,
        activation: &str,
        seed: u64,
        horizon: f64,
        half_width: f64,
    ) -> PyResult<Self> {
        let cfg = DeepOnetConfig {
            sensors,
            embedding_dim,
            branch_hidden,
            trunk_hidden,
            activation: activation.parse().map_err(py_err)?,
            output_scale: 1.0,
            seed,
        };
        Ok(Self {
            inner: DeepOnet::new(&cfg, domain(horizon, half_width)?).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_checkpoint(&path).map_err(py_err)?.0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_checkpoint(&self.inner, &pipeline::MetricHistory::default(), &path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn sensors(&self) -> usize {
        self.inner.sensors()
    }

    #[getter]
    fn output_bias(&self) -> f64 {
        self.inner.output_bias
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    fn set_parameters(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner.set_flat(&values).map_err(py_err)
    }

    /// `G(g)(τ, x)`.
    fn __call__(&self, source: &PySource, tau: f64, x: f64) -> PyResult<f64> {
        self.inner
            .operator_eval(&source.inner, QueryPoint::new(tau, x))
            .map_err(py_err)
    }

    /// Row `i` holds `G(g)(taus[i], x)` for every `x` in `xs`.
    fn grid(&self, source: &PySource, taus: Vec<f64>, xs: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let v = self.inner.operator_eval_grid(&source.inner, &taus, &xs).map_err(py_err)?;
        Ok(v.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

#[pyclass(name = "Dataset", module = "pideeponet_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Sample a dataset from a `key = value` configuration text.
    #[staticmethod]
    #[pyo3(signature = (config = ""))]
    fn generate(config: &str) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        Ok(Self {
            inner: pipeline::generate_dataset(&cfg.train, &cfg.gp, cfg.domain).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_dataset(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn source(&self, index: usize) -> PyResult<PySource> {
        self.inner
            .examples
            .get(index)
            .map(|e| PySource { inner: e.source.clone() })
            .ok_or_else(|| PyIndexError::new_err(format!("function index {index} out of range")))
    }

    /// `(interior, boundary)` points of function `index` as `(τ, x)` pairs.
    fn points(&self, index: usize) -> PyResult<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
        let ex = self
            .inner
            .examples
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("function index {index} out of range")))?;
        let pairs = |v: &[QueryPoint]| v.iter().map(|p| (p.tau, p.x)).collect();
        Ok((pairs(&ex.points.interior), pairs(&ex.points.boundary)))
    }
}

/// Finite-difference solution: `(taus, xs, values)` with `values[n][j]` at
/// `(taus[n], xs[j])`.
#[pyfunction]
#[pyo3(signature = (source, nx = 199, nt = 200, diffusion = "quadratic", horizon = 1.0))]
fn solve(
    source: &PySource,
    nx: usize,
    nt: usize,
    diffusion: &str,
    horizon: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let alpha: DiffusionFunction = diffusion.parse().map_err(py_err)?;
    let d = domain(horizon, source.inner.grid().half_width())?;
    let cfg = FdmConfig {
        nx,
        nt,
        ..FdmConfig::default()
    };
    let sol = solve_fdm(&source.inner, &d, &cfg, alpha).map_err(py_err)?;
    let values = sol.values.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok((sol.tau_nodes(), sol.x_nodes(), values))
}

/// `(physics, operator, total)` loss of `model` on `dataset`.
#[pyfunction]
#[pyo3(signature = (model, dataset, diffusion = "quadratic"))]
fn losses(model: &PyModel, dataset: &PyDataset, diffusion: &str) -> PyResult<(f64, f64, f64)> {
    let alpha: DiffusionFunction = diffusion.parse().map_err(py_err)?;
    let d = &dataset.inner;
    let l = total_loss(&model.inner, &d.examples, alpha, &d.stencil).map_err(py_err)?;
    Ok((l.physics, l.operator, l.total))
}

/// Train a fresh model on `dataset` with the configuration text; returns the
/// model and the logged `(iteration, physics, operator, total, seconds)` rows.
#[pyfunction]
#[pyo3(signature = (dataset, config = ""))]
fn train(py: Python<'_>, dataset: &PyDataset, config: &str) -> PyResult<(PyModel, Vec<(u64, f64, f64, f64, f64)>)> {
    let cfg = parse_config(config)?;
    let data = &dataset.inner;
    let model = cfg.train.init_model(data.domain).map_err(py_err)?;
    let result = py.allow_threads(|| pipeline::train(model, data, &cfg.train, cfg.diffusion));
    let (model, history) = result.map_err(|f| py_err(f.error))?;
    let rows = history
        .records
        .iter()
        .map(|r| (r.iteration, r.physics_loss, r.operator_loss, r.total_loss, r.seconds))
        .collect();
    Ok((PyModel { inner: model }, rows))
}

/// Relative L2 error of `model` against the finite-difference solution for
/// each source; `None` marks a source whose reference solve failed.
#[pyfunction]
#[pyo3(signature = (model, sources, config = ""))]
fn evaluate(py: Python<'_>, model: &PyModel, sources: Vec<PySource>, config: &str) -> PyResult<Vec<Option<f64>>> {
    let cfg = parse_config(config)?;
    let sources: Vec<SourceFunction> = sources.into_iter().map(|s| s.inner).collect();
    let m = &model.inner;
    let report = py
        .allow_threads(|| pipeline::evaluate_on_grid(m, &sources, &m.domain, &cfg.fdm, cfg.diffusion, cfg.eval_grid))
        .map_err(py_err)?;
    Ok(report
        .functions
        .iter()
        .map(|f| match f {
            FunctionError::Scored { relative_l2, .. } => Some(*relative_l2),
            FunctionError::FdmFailed(_) => None,
        })
        .collect())
}

#[pymodule]
fn pideeponet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySource>()?;
    m.add_class::<PyGpSampler>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(losses, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
