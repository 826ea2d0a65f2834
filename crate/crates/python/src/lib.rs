use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use abms_core::codegen;
use abms_core::disease::compartment_graph;
use abms_core::dsl;
use abms_core::engine::{self, OutputTable, RunConfig, World};
use abms_core::expr::Value;
use abms_core::metamodel::{self, CompartmentKind};

fn value_to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Int(i) => i.into_pyobject(py)?.into_any().unbind(),
        Value::Real(r) => r.into_pyobject(py)?.into_any().unbind(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Text(s) | Value::Symbol(s) => s.into_pyobject(py)?.into_any().unbind(),
    })
}

fn table_to_py<'py>(py: Python<'py>, t: &OutputTable) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("path", &t.path)?;
    d.set_item("columns", &t.columns)?;
    let rows = t
        .rows
        .iter()
        .map(|r| r.iter().map(|v| value_to_py(py, v)).collect::<PyResult<Vec<_>>>())
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("rows", rows)?;
    d.set_item("csv", t.to_csv())?;
    Ok(d)
}

/// A parsed model.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: metamodel::Model,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn agent_types(&self) -> Vec<String> {
        self.inner.agents().map(|a| a.name.clone()).collect()
    }

    #[getter]
    fn diseases(&self) -> Vec<String> {
        self.inner.diseases().map(|d| d.name.clone()).collect()
    }

    #[getter]
    fn outputs(&self) -> Vec<String> {
        self.inner.outputs().map(|o| o.name.clone()).collect()
    }

    /// Canonical source text.
    fn format(&self) -> String {
        dsl::format(&self.inner)
    }

    /// Diagnostics as `(severity, path, message)` tuples.
    fn validate(&self) -> Vec<(String, String, String)> {
        metamodel::validate(&self.inner)
            .diagnostics
            .into_iter()
            .map(|d| {
                let sev = match d.severity {
                    metamodel::Severity::Error => "error",
                    metamodel::Severity::Warning => "warning",
                };
                (sev.to_string(), d.path, d.message)
            })
            .collect()
    }

    /// NetLogo source and the procedure names emitted per element.
    fn generate(&self) -> (String, Vec<(String, Vec<String>)>) {
        let (src, report) = codegen::generate(&self.inner);
        (src, report.entries.into_iter().map(|e| (e.element, e.procedures)).collect())
    }

    fn check_structure(&self, source: &str) -> bool {
        codegen::check_structure(source, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Model({:?})", self.inner.name)
    }
}

#[pyfunction]
fn parse(text: &str) -> PyResult<PyModel> {
    dsl::parse(text).map(|inner| PyModel { inner }).map_err(|errors| {
        let lines: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
        PyValueError::new_err(lines.join("\n"))
    })
}

#[pyfunction]
fn load(path: PathBuf) -> PyResult<PyModel> {
    let text = std::fs::read_to_string(&path).map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
    parse(&text)
}

/// A world that can be advanced tick by tick.
#[pyclass(name = "Simulation")]
struct PySimulation {
    world: World,
}

#[pymethods]
impl PySimulation {
    #[new]
    #[pyo3(signature = (model, seed, base_dir = PathBuf::from(".")))]
    fn new(model: &PyModel, seed: u64, base_dir: PathBuf) -> PyResult<Self> {
        let report = metamodel::validate(&model.inner);
        if report.has_errors() {
            let lines: Vec<String> = report.errors().map(|d| d.to_string()).collect();
            return Err(PyValueError::new_err(lines.join("\n")));
        }
        let config = RunConfig::new(seed, 0).with_base_dir(base_dir);
        let world = engine::build_world(&model.inner, &config).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(PySimulation { world })
    }

    #[getter]
    fn tick(&self) -> u64 {
        self.world.tick
    }

    /// Agents currently alive.
    #[getter]
    fn population(&self) -> usize {
        self.world.agents.len()
    }

    #[pyo3(signature = (ticks = 1))]
    fn step(&mut self, ticks: u64) -> PyResult<()> {
        for _ in 0..ticks {
            engine::tick(&mut self.world).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        }
        Ok(())
    }

    fn digest(&self) -> String {
        self.world.digest()
    }

    fn compartment_counts(&self, disease: &str) -> Vec<(String, usize)> {
        self.world.compartment_counts(disease)
    }

    fn positions(&self) -> Vec<(u64, f64, f64)> {
        self.world.agents.iter().map(|a| (a.id, a.pos.x, a.pos.y)).collect()
    }

    fn outputs<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for t in &self.world.outputs {
            d.set_item(&t.name, table_to_py(py, t)?)?;
        }
        Ok(d)
    }
}

/// Runs a model and returns its output tables keyed by dataset name.
#[pyfunction]
#[pyo3(signature = (model, seed, ticks, base_dir = PathBuf::from("."), out_dir = None))]
fn run<'py>(
    py: Python<'py>,
    model: &PyModel,
    seed: u64,
    ticks: u64,
    base_dir: PathBuf,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut config = RunConfig::new(seed, ticks).with_base_dir(base_dir);
    config.out_dir = out_dir;
    let result = py
        .detach(|| engine::run(&model.inner, &config))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    for t in &result.tables {
        d.set_item(&t.name, table_to_py(py, t)?)?;
    }
    Ok(d)
}

/// Edges `(from, to, kind)` of a standard compartmental model.
#[pyfunction]
fn compartment_edges(kind: &str) -> PyResult<Vec<(String, String, String)>> {
    let kind = CompartmentKind::from_keyword(kind)
        .filter(|k| *k != CompartmentKind::Custom)
        .ok_or_else(|| PyValueError::new_err(format!("unknown compartmental model `{kind}`")))?;
    Ok(compartment_graph(kind)
        .edges
        .into_iter()
        .map(|e| (e.from, e.to, format!("{:?}", e.kind).to_lowercase()))
        .collect())
}

#[pymodule]
fn abms(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(load, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compartment_edges, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
