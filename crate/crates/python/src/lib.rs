//! Python bindings: datasets, training, sampling, reflow and evaluation.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use reflow_core::autodiff::Tensor;
use reflow_core::checkpoint::Checkpoint;
use reflow_core::config::RunConfig;
use reflow_core::data::{load_dataset, save_dataset, Dataset as CoreDataset, SampleSet, Split};
use reflow_core::metrics::{frechet_distance as core_fd, FeatureSet};
use reflow_core::model::VelocityModel;
use reflow_core::ode::{self, SolverSpec};
use reflow_core::pipeline::{self, DurationSource, SampleMetrics};
use reflow_core::reflow::{generate_coupling, reflow_round, straightness, ReflowOptions};
use reflow_core::sampler::Target;
use reflow_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Version { .. } => PyIOError::new_err(e.to_string()),
        Error::Solver { .. }
        | Error::MaxSteps { .. }
        | Error::TooManyFailures { .. }
        | Error::NonFinite(_)
        | Error::NanGradient(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("expected a non-empty list of equal-length rows"));
    }
    let n = rows.len();
    Tensor::new(vec![n, d], rows.into_iter().flatten().collect()).map_err(py_err)
}

fn solver_spec(solver: &str, steps: usize, rtol: f64, atol: f64) -> PyResult<SolverSpec> {
    let spec = match solver {
        "euler" => SolverSpec::euler(steps),
        "rk45" => SolverSpec::rk45(rtol, atol),
        other => return Err(PyValueError::new_err(format!("unknown solver `{other}` (euler | rk45)"))),
    };
    spec.validate().map_err(py_err)?;
    Ok(spec)
}

/// Run configuration parsed from TOML.
#[pyclass(name = "RunConfig", module = "reflow_py", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml(toml).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn iters(&self) -> u64 {
        self.inner.optim_config().iters
    }
}

/// A dataset file: corpus, points, couplings or samples.
#[pyclass(name = "Dataset", module = "reflow_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind_name()
    }

    fn __len__(&self) -> usize {
        match &self.inner {
            CoreDataset::Corpus(c) => c.utterances.len(),
            CoreDataset::Points(p) => p.len(),
            CoreDataset::Couplings(c) => c.len(),
            CoreDataset::Samples(s) => s.items.len(),
        }
    }

    /// Rows of the given split (points), pooled frames of the split (corpus),
    /// or every frame (samples).
    #[pyo3(signature = (split = "test"))]
    fn frames(&self, split: &str) -> PyResult<Vec<Vec<f64>>> {
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        Ok(match &self.inner {
            CoreDataset::Points(p) => rows(&p.subset(split)),
            CoreDataset::Corpus(c) => rows(&c.frames(split)),
            CoreDataset::Samples(s) => rows(&s.frames()),
            CoreDataset::Couplings(_) => return Err(PyValueError::new_err("couplings have no frames")),
        })
    }

    fn __repr__(&self) -> String {
        format!("<Dataset kind={} len={}>", self.kind(), self.__len__())
    }
}

/// A velocity model with its generation counter.
#[pyclass(name = "Model", module = "reflow_py", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: VelocityModel,
    config: Option<RunConfig>,
}

#[pymethods]
impl PyModel {
    /// Trains a fresh model on the training split.
    #[staticmethod]
    fn train(config: &PyRunConfig, data: &PyDataset) -> PyResult<Self> {
        let trainer = pipeline::train_model(&config.inner, &data.inner, |_, _| Ok(())).map_err(py_err)?;
        Ok(Self {
            inner: trainer.into_model(),
            config: Some(config.inner.clone()),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        Ok(Self {
            inner: ck.model,
            config: ck.config,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::from_model(self.inner.clone(), self.config.clone())
            .save(path)
            .map_err(py_err)
    }

    #[getter]
    fn generation(&self) -> u32 {
        self.inner.generation()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn conditional(&self) -> bool {
        self.inner.is_conditional()
    }

    /// Velocity of an unconditional model at `[n, dim]` points, all at time `t`.
    fn velocity(&self, x: Vec<Vec<f64>>, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let x = tensor(x)?;
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let v = self
            .inner
            .velocity_batch(&x.reshape(&[n, d, 1]).map_err(py_err)?, &vec![t; n], None)
            .map_err(py_err)?;
        Ok(rows(&v.reshape(&[n, d]).map_err(py_err)?))
    }

    /// Generates samples for held-out items of `data`.
    #[pyo3(signature = (data, solver = "rk45", steps = 50, rtol = 1e-5, atol = 1e-5, n = 0, seed = 0, durations = "oracle", batch = 256))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        data: &PyDataset,
        solver: &str,
        steps: usize,
        rtol: f64,
        atol: f64,
        n: usize,
        seed: u64,
        durations: &str,
        batch: usize,
    ) -> PyResult<PySamples> {
        let spec = solver_spec(solver, steps, rtol, atol)?;
        let durations: DurationSource = durations.parse().map_err(py_err)?;
        let targets = pipeline::targets_for(&self.inner, &data.inner, n, durations).map_err(py_err)?;
        let norm = pipeline::output_normalization(&data.inner);
        let (set, metrics) = pipeline::sample(&self.inner, &targets, &spec, seed, batch, norm).map_err(py_err)?;
        Ok(PySamples { set, metrics })
    }

    /// Mean squared deviation of velocities from path chords.
    #[pyo3(signature = (n_paths = 256, time_points = 8, seed = 0))]
    fn straightness(&self, n_paths: usize, time_points: usize, seed: u64) -> PyResult<f64> {
        if self.inner.is_conditional() {
            return Err(PyValueError::new_err("straightness here covers unconditional models only"));
        }
        let targets = [Target::unconditional(1)];
        let r = straightness(&self.inner, &targets, n_paths, time_points, &SolverSpec::default(), seed, 256)
            .map_err(py_err)?;
        Ok(r.s)
    }

    /// One reflow round on an unconditional toy dataset: couplings from this
    /// model, then a fresh model trained on them.
    #[pyo3(signature = (data, pairs, iters, seed = 0))]
    fn reflow(&self, data: &PyDataset, pairs: usize, iters: u64, seed: u64) -> PyResult<PyModel> {
        if !matches!(data.inner, CoreDataset::Points(_)) {
            return Err(PyValueError::new_err("Model.reflow takes a points dataset; use the CLI for corpora"));
        }
        let cfg = self.config.clone().unwrap_or_default();
        let run = generate_coupling(
            &self.inner,
            &[Target::unconditional(1)],
            pairs,
            &cfg.coupling_solver(),
            seed,
            cfg.sample.batch,
        )
        .map_err(py_err)?;
        let mut optim = cfg.optim_config();
        optim.iters = iters;
        let opts = ReflowOptions {
            optim,
            finetune: false,
            freeze_frontend: false,
            seed,
        };
        let model = reflow_round(&self.inner, &run.set, None, &opts, |_| Ok(())).map_err(py_err)?;
        Ok(PyModel {
            inner: model,
            config: Some(cfg),
        })
    }
}

/// Generated samples plus per-sample cost accounting.
#[pyclass(name = "Samples", module = "reflow_py")]
struct PySamples {
    set: SampleSet,
    metrics: SampleMetrics,
}

#[pymethods]
impl PySamples {
    fn __len__(&self) -> usize {
        self.set.items.len()
    }

    fn frames(&self) -> Vec<Vec<f64>> {
        rows(&self.set.frames())
    }

    #[getter]
    fn mean_nfe(&self) -> f64 {
        self.metrics.mean_nfe
    }

    #[getter]
    fn nfe(&self) -> Vec<usize> {
        self.metrics.samples.iter().map(|r| r.nfe).collect()
    }

    #[getter]
    fn mean_rtf(&self) -> f64 {
        self.metrics.mean_rtf
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset(path, &CoreDataset::Samples(self.set.clone())).map_err(py_err)
    }

    /// FD against `reference` (and oracle error when `oracle` is a corpus).
    #[pyo3(signature = (reference, oracle = None))]
    fn evaluate(&self, reference: &PyDataset, oracle: Option<&PyDataset>) -> PyResult<BTreeMap<String, f64>> {
        let corpus = match oracle.map(|o| &o.inner) {
            Some(CoreDataset::Corpus(c)) => Some(c),
            Some(_) => return Err(PyValueError::new_err("oracle must be a corpus")),
            None => None,
        };
        let r = pipeline::evaluate(&self.set, &reference.inner, corpus, Some(&self.metrics)).map_err(py_err)?;
        let mut out = BTreeMap::from([("fd".to_string(), r.fd), ("n_gen".to_string(), r.n_gen as f64)]);
        for (k, v) in [("mse_oracle", r.mse_oracle), ("mean_nfe", r.mean_nfe), ("rtf", r.rtf)] {
            if let Some(v) = v {
                out.insert(k.to_string(), v);
            }
        }
        Ok(out)
    }
}

/// Builds the dataset described by a config.
#[pyfunction]
fn gen_data(config: &PyRunConfig) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: pipeline::gen_data(&config.inner).map_err(py_err)?,
    })
}

/// Fréchet distance between Gaussian fits of two `[n, d]` feature sets.
#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = FeatureSet::new(tensor(a)?, "a").map_err(py_err)?;
    let b = FeatureSet::new(tensor(b)?, "b").map_err(py_err)?;
    core_fd(&a, &b).map_err(py_err)
}

/// Integrates `dz/dt = f(z, t)` from 0 to 1 for a Python callable `f`
/// mapping a list of floats and a time to a list of floats.
/// Returns `(z1, nfe)`.
#[pyfunction]
#[pyo3(signature = (f, z0, solver = "rk45", steps = 50, rtol = 1e-5, atol = 1e-5))]
fn solve(
    f: Bound<'_, PyAny>,
    z0: Vec<f64>,
    solver: &str,
    steps: usize,
    rtol: f64,
    atol: f64,
) -> PyResult<(Vec<f64>, usize)> {
    let spec = solver_spec(solver, steps, rtol, atol)?;
    let n = z0.len();
    let z0 = Tensor::new(vec![n], z0).map_err(py_err)?;
    let raised = std::cell::RefCell::new(None::<PyErr>);
    let field = |z: &Tensor, t: f64| -> reflow_core::Result<Tensor> {
        let out = f.call1((z.data().to_vec(), t)).and_then(|v| v.extract::<Vec<f64>>());
        match out {
            Ok(v) => Tensor::new(vec![n], v),
            Err(e) => {
                let msg = e.to_string();
                raised.borrow_mut().get_or_insert(e);
                Err(Error::InvalidArgument(format!("velocity callback raised: {msg}")))
            }
        }
    };
    let r = ode::solve(&field, &z0, &spec);
    if let Some(e) = raised.into_inner() {
        return Err(e);
    }
    let r = r.map_err(py_err)?;
    Ok((r.z1.into_data(), r.nfe))
}

#[pymodule]
fn reflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySamples>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    Ok(())
}
