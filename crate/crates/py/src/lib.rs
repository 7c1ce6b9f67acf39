//! Python bindings for soctrace.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use soctrace::catalog::{load_catalog, FlowSet as CoreFlowSet};
use soctrace::report::{sweep_table, AnalysisReport};
use soctrace::scenario::{check_compliance, AnalysisError, Limits, ViewLevel};
use soctrace::select::{evaluate, strategy_mask, Strategy};
use soctrace::sim::{inject_bug, simulate as core_simulate, BugSpec, GroundTruth, SimConfig};
use soctrace::trace::{SelectionMask, SignalTrace};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Expanded flow catalog.
#[pyclass(name = "FlowSet", frozen)]
struct PyFlowSet {
    inner: CoreFlowSet,
}

#[pymethods]
impl PyFlowSet {
    /// The bundled SoC catalog.
    #[staticmethod]
    fn bundled() -> Self {
        PyFlowSet {
            inner: CoreFlowSet::bundled(),
        }
    }

    /// Loads manifests and flow files.
    #[staticmethod]
    fn load(paths: Vec<String>) -> PyResult<Self> {
        let cat = load_catalog(&paths).map_err(value_err)?;
        Ok(PyFlowSet {
            inner: CoreFlowSet::new(cat).map_err(value_err)?,
        })
    }

    /// Concrete flow ids in expansion order.
    fn flows(&self) -> Vec<String> {
        self.inner.flows.iter().map(|f| f.name.clone()).collect()
    }

    fn templates(&self) -> Vec<String> {
        let mut v: Vec<String> = self.inner.catalog.templates.iter().map(|t| t.name.clone()).collect();
        v.sort();
        v
    }

    /// Traced link names, message links first.
    fn links(&self) -> Vec<String> {
        self.inner.enc.links.iter().map(|l| l.name.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.flows.len()
    }
}

#[pyclass(name = "Trace", frozen)]
struct PyTrace {
    inner: SignalTrace,
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyTrace {
            inner: SignalTrace::parse(text).map_err(value_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Mask", frozen)]
struct PyMask {
    inner: SelectionMask,
}

#[pymethods]
impl PyMask {
    /// Mask produced by a strategy string such as `S2+cmd+sid`.
    #[staticmethod]
    fn from_strategy(fs: &PyFlowSet, strategy: &str) -> PyResult<Self> {
        let st: Strategy = strategy.parse().map_err(value_err)?;
        Ok(PyMask {
            inner: strategy_mask(&fs.inner, &st),
        })
    }

    #[staticmethod]
    fn parse(fs: &PyFlowSet, text: &str) -> PyResult<Self> {
        Ok(PyMask {
            inner: SelectionMask::parse(text, &fs.inner.enc).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn full(fs: &PyFlowSet) -> Self {
        PyMask {
            inner: SelectionMask::all(&fs.inner.enc),
        }
    }

    fn to_text(&self, fs: &PyFlowSet) -> String {
        self.inner.to_text(&fs.inner.enc)
    }

    fn bit_count(&self) -> usize {
        self.inner.count()
    }
}

/// Runs the simulator. Returns `(trace, ground_truth_text)`.
#[pyfunction]
#[pyo3(signature = (fs, seed, budget=10, probability=0.1, templates=vec![], blocks=vec![], blocking_cache=true, inject=None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    fs: &PyFlowSet,
    seed: u64,
    budget: usize,
    probability: f64,
    templates: Vec<String>,
    blocks: Vec<String>,
    blocking_cache: bool,
    inject: Option<&str>,
) -> PyResult<(PyTrace, String)> {
    let cfg = SimConfig {
        seed,
        budget,
        probability,
        templates,
        blocks,
        blocking_cache,
        ..Default::default()
    };
    let (mut trace, gt) = core_simulate(&fs.inner, &cfg).map_err(value_err)?;
    if let Some(spec) = inject {
        let bug = BugSpec::parse(spec).map_err(value_err)?;
        trace = inject_bug(&fs.inner, &trace, &bug).map_err(value_err)?.0;
    }
    Ok((PyTrace { inner: trace }, gt.to_text()))
}

/// Checks a trace; returns the report as a dict. Raises RuntimeError when
/// the scenario limit or time limit is exceeded.
#[pyfunction]
#[pyo3(signature = (fs, trace, mask, level=3, max_scenarios=1_000_000, time_limit=None))]
fn analyze<'py>(
    py: Python<'py>,
    fs: &PyFlowSet,
    trace: &PyTrace,
    mask: &PyMask,
    level: u8,
    max_scenarios: usize,
    time_limit: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let lvl = ViewLevel::from_number(level).ok_or_else(|| value_err("level must be 1, 2 or 3"))?;
    let limits = Limits {
        max_scenarios: max_scenarios.max(1),
        time_limit: time_limit.map(std::time::Duration::from_secs_f64),
    };
    let out = py
        .detach(|| check_compliance(&fs.inner, &trace.inner, &mask.inner, &limits))
        .map_err(|e| match e {
            AnalysisError::Trace(t) => value_err(t),
            other => PyRuntimeError::new_err(other.to_string()),
        })?;
    let json = AnalysisReport::new(&fs.inner, &out, lvl).to_json();
    py.import("json")?.call_method1("loads", (json,))
}

/// Runs the strategy matrix; returns the table as text.
#[pyfunction]
#[pyo3(signature = (fs, trace, truth=None, max_scenarios=1_000_000, time_limit=600.0))]
fn sweep(
    py: Python<'_>,
    fs: &PyFlowSet,
    trace: &PyTrace,
    truth: Option<&str>,
    max_scenarios: usize,
    time_limit: f64,
) -> PyResult<String> {
    let gt = truth.map(GroundTruth::parse).transpose().map_err(value_err)?;
    let limits = Limits {
        max_scenarios: max_scenarios.max(1),
        time_limit: Some(std::time::Duration::from_secs_f64(time_limit)),
    };
    let rows = py
        .detach(|| {
            Strategy::matrix()
                .iter()
                .map(|s| evaluate(&fs.inner, s, &trace.inner, gt.as_ref(), &limits))
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(value_err)?;
    Ok(sweep_table(&rows, false))
}

#[pymodule]
fn soctrace_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFlowSet>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
