//! Python bindings: search spaces, synthetic landscapes, the policy network,
//! search runs and log analytics. Structured results come back as plain
//! Python lists and dicts.

use num_bigint::BigUint;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nas_core::analytics;
use nas_core::controller::{self, PolicyParams};
use nas_core::netbench::{self as nb, Task};
use nas_core::orchestrator::{self as orch, SearchConfig};
use nas_core::space::{self, ArchitectureEncoding};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Serialize through JSON into native Python objects.
fn to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(module = "nasrl", name = "SearchSpace")]
struct PySearchSpace {
    inner: space::SearchSpace,
}

#[pymethods]
impl PySearchSpace {
    /// Builtin name or path to a JSON spec; `input_dims` overrides input widths.
    #[new]
    #[pyo3(signature = (name, input_dims=None))]
    fn new(name: &str, input_dims: Option<Vec<(String, usize)>>) -> PyResult<Self> {
        let mut spec = orch::load_space_spec(name).map_err(value_err)?;
        if let Some(d) = input_dims {
            spec = spec.with_input_dims(&d).map_err(value_err)?;
        }
        Ok(Self { inner: space::build_space(spec).map_err(value_err)? })
    }

    #[getter]
    fn size(&self) -> BigUint {
        self.inner.size().clone()
    }

    #[getter]
    fn num_slots(&self) -> usize {
        self.inner.num_slots()
    }

    fn arities(&self) -> Vec<usize> {
        self.inner.arities()
    }

    /// `(slot path, [choice labels])` for every decision slot.
    fn describe(&self) -> Vec<(String, Vec<String>)> {
        (0..self.inner.num_slots())
            .map(|k| (self.inner.slots()[k].path.to_string(), self.inner.choices(k).iter().map(|c| c.to_string()).collect()))
            .collect()
    }

    fn sample(&self, seed: u64) -> Vec<usize> {
        space::sample_random(&self.inner, seed).0
    }

    /// Decoded architecture graph as a dict.
    fn decode(&self, py: Python<'_>, encoding: Vec<usize>) -> PyResult<Py<PyAny>> {
        let g = space::decode(&self.inner, &ArchitectureEncoding(encoding)).map_err(value_err)?;
        Ok(py.import("json")?.call_method1("loads", (g.to_json(),))?.unbind())
    }

    /// Trainable parameters of the decoded network with one regression output.
    fn param_count(&self, encoding: Vec<usize>) -> PyResult<usize> {
        let g = space::decode(&self.inner, &ArchitectureEncoding(encoding)).map_err(value_err)?;
        let p = nb::compile(&g, &g.inputs(), Task::Regression).map_err(value_err)?;
        Ok(nb::count_params(&p))
    }

    fn __repr__(&self) -> String {
        format!("SearchSpace(slots={}, size={})", self.inner.num_slots(), self.inner.size())
    }
}

#[pyclass(module = "nasrl", name = "SyntheticLandscape")]
struct PyLandscape {
    inner: nb::SyntheticLandscape,
}

#[pymethods]
impl PyLandscape {
    #[new]
    #[pyo3(signature = (arities, seed, pairs=0, strength=0.0))]
    fn new(arities: Vec<usize>, seed: u64, pairs: usize, strength: f64) -> Self {
        Self { inner: nb::SyntheticLandscape::new(&arities, seed, pairs, strength) }
    }

    #[getter]
    fn size(&self) -> u64 {
        self.inner.size()
    }

    fn reward(&self, encoding: Vec<usize>) -> PyResult<f64> {
        self.inner.reward(&encoding).map_err(value_err)
    }

    /// Best encoding and its reward by exhaustive search; `None` when too large.
    fn optimum(&self) -> Option<(Vec<usize>, f64)> {
        self.inner.optimum()
    }
}

#[pyclass(module = "nasrl", name = "Policy")]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (arities, seed, hidden=32, embed=16))]
    fn new(arities: Vec<usize>, seed: u64, hidden: usize, embed: usize) -> Self {
        Self { inner: controller::init_policy(&arities, seed, hidden, embed) }
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.len()
    }

    /// `m` encodings drawn from the policy.
    fn sample(&self, m: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = controller::sample_batch(&self.inner, m, &mut rng).map_err(runtime_err)?;
        Ok(batch.into_iter().map(|t| t.encoding).collect())
    }

    /// Per-slot action probabilities along `encoding`.
    fn probabilities(&self, encoding: Vec<usize>) -> Vec<Vec<f64>> {
        controller::action_probabilities(&self.inner, &encoding)
    }

    fn save(&self, path: &str, step: u64) -> PyResult<()> {
        controller::write_checkpoint(path.as_ref(), &self.inner, step).map_err(runtime_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<(Self, u64)> {
        let (p, step) = controller::read_checkpoint(path.as_ref()).map_err(value_err)?;
        Ok((Self { inner: p }, step))
    }
}

#[pyclass(module = "nasrl", name = "SearchLog")]
struct PySearchLog {
    inner: orch::SearchLog,
}

#[pymethods]
impl PySearchLog {
    /// Load a JSON-lines log; malformed event lines are skipped.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (log, _) = orch::SearchLog::load(path.as_ref()).map_err(value_err)?;
        Ok(Self { inner: log })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(runtime_err)
    }

    #[getter]
    fn header(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.header)
    }

    #[getter]
    fn events(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.events)
    }

    #[getter]
    fn end_reason(&self) -> Option<String> {
        self.inner.end_reason().map(str::to_string)
    }

    fn __len__(&self) -> usize {
        self.inner.events.len()
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &analytics::stats(&self.inner))
    }

    #[pyo3(signature = (k=10))]
    fn top_k(&self, py: Python<'_>, k: usize) -> PyResult<Py<PyAny>> {
        to_py(py, &analytics::top_k(&self.inner, k))
    }

    fn trajectory(&self, py: Python<'_>, bin: f64) -> PyResult<Py<PyAny>> {
        to_py(py, &analytics::trajectory(&self.inner, bin).map_err(value_err)?)
    }

    #[pyo3(signature = (bin, workers=None))]
    fn utilization(&self, py: Python<'_>, bin: f64, workers: Option<usize>) -> PyResult<Py<PyAny>> {
        let w = workers.unwrap_or(self.inner.header.workers);
        to_py(py, &analytics::utilization(&self.inner, bin, w).map_err(value_err)?)
    }

    #[pyo3(signature = (until, workers=None))]
    fn mean_utilization(&self, until: f64, workers: Option<usize>) -> f64 {
        analytics::mean_utilization(&self.inner, workers.unwrap_or(self.inner.header.workers), until)
    }
}

/// Run a search. `config` is a JSON string or a dict with the same fields.
#[pyfunction]
fn run_search(py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<PySearchLog> {
    let text: String = if let Ok(d) = config.cast::<PyDict>() {
        py.import("json")?.call_method1("dumps", (d,))?.extract()?
    } else {
        config.extract()?
    };
    let cfg = SearchConfig::from_json(&text).map_err(value_err)?;
    let res = py.detach(|| orch::run_search(&cfg));
    match res {
        Ok(run) => Ok(PySearchLog { inner: run.log }),
        Err(orch::SearchError::Config(e)) => Err(value_err(e)),
        Err(e) => Err(runtime_err(e)),
    }
}

/// Quantiles of the best-so-far reward across replicated logs, per time bin.
#[pyfunction]
#[pyo3(signature = (logs, bin, quantiles=None))]
fn quantile_bands(py: Python<'_>, logs: Vec<PyRef<'_, PySearchLog>>, bin: f64, quantiles: Option<Vec<f64>>) -> PyResult<Py<PyAny>> {
    let ls: Vec<orch::SearchLog> = logs.iter().map(|l| l.inner.clone()).collect();
    let qs = quantiles.unwrap_or(analytics::DEFAULT_QUANTILES.to_vec());
    to_py(py, &analytics::quantile_bands(&ls, bin, &qs).map_err(value_err)?)
}

/// Exact number of architectures in a builtin or JSON space.
#[pyfunction]
fn space_size(name: &str) -> PyResult<BigUint> {
    Ok(PySearchSpace::new(name, None)?.inner.size().clone())
}

/// Parameter count of a builtin reference network at its published dimensions.
#[pyfunction]
fn baseline_params(name: &str) -> PyResult<usize> {
    let g = space::builtin_baseline(name).map_err(value_err)?;
    let p = nb::compile(&g, &g.inputs(), Task::Regression).map_err(value_err)?;
    Ok(nb::count_params(&p))
}

/// Write a preset synthetic dataset to `out_dir`; returns the manifest path.
#[pyfunction]
fn generate_dataset(preset: &str, seed: u64, out_dir: &str) -> PyResult<String> {
    let ds = nb::generate_dataset(preset, seed).map_err(value_err)?;
    let m = nb::write_dataset(&ds, out_dir.as_ref()).map_err(runtime_err)?;
    Ok(m.display().to_string())
}

#[pymodule]
pub fn nasrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySearchSpace>()?;
    m.add_class::<PyLandscape>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PySearchLog>()?;
    m.add_function(wrap_pyfunction!(run_search, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_bands, m)?)?;
    m.add_function(wrap_pyfunction!(space_size, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_params, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
