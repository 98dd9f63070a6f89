//! Python bindings. Ads, expressions, slots and scenarios are classes; the
//! plain data records (jobs, entries, nodes, policies, events, metrics) cross
//! the boundary as dicts in their JSON shape.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyList, PyString};
use serde::de::DeserializeOwned;
use serde::Serialize;

use glidepool::adlang::{self, AdKind, Value};
use glidepool::engine::{self, EventLog, ScenarioConfig};
use glidepool::frontend::{self, PilotLedger};
use glidepool::model::{self, FactoryEntry, JobAd, NodeSpec, SitePolicy};
use glidepool::negotiator;
use glidepool::sitesim::{self, Pilot, PilotState, SlotState};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text = obj.py().import("json")?.call_method1("dumps", (obj,))?;
    serde_json::from_str(text.cast::<PyString>()?.to_str()?).map_err(value_error)
}

fn kind_of(name: &str) -> PyResult<AdKind> {
    match name.to_ascii_lowercase().as_str() {
        "job" => Ok(AdKind::Job),
        "machine" => Ok(AdKind::Machine),
        "untagged" => Ok(AdKind::Untagged),
        other => Err(PyValueError::new_err(format!(
            "ad kind must be 'job', 'machine' or 'untagged', not {:?}",
            other
        ))),
    }
}

/// Marker returned for the Error value of the ad language.
#[pyclass(frozen, name = "ErrorValue", module = "pyglidepool")]
struct ErrorValue;

#[pymethods]
impl ErrorValue {
    fn __repr__(&self) -> &'static str {
        "error"
    }

    fn __bool__(&self) -> bool {
        false
    }
}

/// Undefined becomes None; Error becomes an `ErrorValue`.
fn value_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Undefined => py.None().into_bound(py),
        Value::Error => Bound::new(py, ErrorValue)?.into_any(),
        Value::Boolean(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Integer(i) => i.into_pyobject(py)?.into_any(),
        Value::Real(r) => r.into_pyobject(py)?.into_any(),
        Value::Text(s) => s.into_pyobject(py)?.into_any(),
        Value::List(items) => {
            let out = PyList::empty(py);
            for item in items {
                out.append(value_to_py(py, item)?)?;
            }
            out.into_any()
        }
    })
}

#[pyclass(frozen, name = "Expression", module = "pyglidepool")]
struct PyExpression(adlang::Expr);

#[pymethods]
impl PyExpression {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        adlang::parse_expression(text)
            .map(PyExpression)
            .map_err(value_error)
    }

    /// Value of the expression with `my` and `target` as the two ads.
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        my: PyRef<'_, PyClassAd>,
        target: PyRef<'_, PyClassAd>,
    ) -> PyResult<Bound<'py, PyAny>> {
        value_to_py(py, &adlang::evaluate(&self.0, &my.0, &target.0))
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Expression({:?})", self.0.to_string())
    }

    fn __eq__(&self, other: PyRef<'_, PyExpression>) -> bool {
        self.0 == other.0
    }
}

#[pyclass(name = "ClassAd", module = "pyglidepool")]
struct PyClassAd(adlang::ClassAd);

#[pymethods]
impl PyClassAd {
    /// An ad of `kind` ("job", "machine" or "untagged"), optionally from
    /// `Name = expr` lines.
    #[new]
    #[pyo3(signature = (kind, text = None))]
    fn new(kind: &str, text: Option<&str>) -> PyResult<Self> {
        let kind = kind_of(kind)?;
        match text {
            Some(t) => adlang::ClassAd::parse_lines(kind, t)
                .map(PyClassAd)
                .map_err(value_error),
            None => Ok(PyClassAd(adlang::ClassAd::new(kind))),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(PyClassAd)
            .map_err(value_error)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(value_error)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.0.kind() {
            AdKind::Job => "job",
            AdKind::Machine => "machine",
            AdKind::Untagged => "untagged",
        }
    }

    fn keys(&self) -> Vec<String> {
        self.0.iter().map(|(n, _)| n.to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.0.get(name).is_some()
    }

    /// The expression bound to `name`, as text.
    fn __getitem__(&self, name: &str) -> PyResult<String> {
        self.0
            .get(name)
            .map(|e| e.to_string())
            .ok_or_else(|| pyo3::exceptions::PyKeyError::new_err(name.to_string()))
    }

    fn __setitem__(&mut self, name: &str, expr: &str) -> PyResult<()> {
        let e = adlang::parse_expression(expr).map_err(value_error)?;
        self.0.insert(name, e);
        Ok(())
    }

    /// Value of attribute `name` with `target` as the other ad.
    #[pyo3(signature = (name, target = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        name: &str,
        target: Option<PyRef<'_, PyClassAd>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let empty = adlang::ClassAd::default();
        let target = target.as_ref().map(|t| &t.0).unwrap_or(&empty);
        value_to_py(py, &adlang::evaluate_attr(name, &self.0, target))
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __eq__(&self, other: PyRef<'_, PyClassAd>) -> bool {
        self.0 == other.0
    }
}

#[pyfunction]
fn parse_expression(text: &str) -> PyResult<PyExpression> {
    PyExpression::new(text)
}

#[pyfunction]
fn symmetric_match(job: PyRef<'_, PyClassAd>, machine: PyRef<'_, PyClassAd>) -> bool {
    adlang::symmetric_match(&job.0, &machine.0)
}

/// Factory entry XML to an entry dict.
#[pyfunction]
fn parse_factory_entry_xml<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let entry = model::parse_factory_entry_xml(text).map_err(value_error)?;
    to_py(py, &entry)
}

#[pyfunction]
fn factory_entry_to_xml(entry: &Bound<'_, PyAny>) -> PyResult<String> {
    Ok(from_py::<FactoryEntry>(entry)?.to_xml())
}

/// "MustUseGPU", "CanUseGPU" or "CpuOnly".
#[pyfunction]
fn classify_gpu_use<'py>(py: Python<'py>, job: &Bound<'_, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &model::classify_gpu_use(&from_py::<JobAd>(job)?))
}

#[pyfunction]
fn static_entry_compat(job: &Bound<'_, PyAny>, entry: &Bound<'_, PyAny>) -> PyResult<bool> {
    Ok(model::static_entry_compat(&from_py(job)?, &from_py(entry)?))
}

#[pyfunction]
fn build_job_ad(job: &Bound<'_, PyAny>) -> PyResult<PyClassAd> {
    Ok(PyClassAd(negotiator::build_job_ad(&from_py(job)?)))
}

/// One frontend cycle. `ledger` maps entry names to their pilot books and
/// `policies` maps site names to site policies.
#[pyfunction]
fn fe_cycle<'py>(
    py: Python<'py>,
    idle_jobs: &Bound<'_, PyAny>,
    entries: &Bound<'_, PyAny>,
    ledger: &Bound<'_, PyAny>,
    policies: &Bound<'_, PyAny>,
) -> PyResult<Bound<'py, PyAny>> {
    let jobs: Vec<JobAd> = from_py(idle_jobs)?;
    let entries: Vec<FactoryEntry> = from_py(entries)?;
    let ledger: PilotLedger = from_py(ledger)?;
    let policies: HashMap<String, SitePolicy> = from_py(policies)?;
    let actions = frontend::fe_cycle(&jobs, &entries, &ledger, &policies).map_err(value_error)?;
    to_py(py, &actions)
}

/// A registered partitionable slot.
#[pyclass(name = "Slot", module = "pyglidepool")]
struct PySlot {
    slot: SlotState,
    policy: SitePolicy,
}

#[pymethods]
impl PySlot {
    /// Runs a pilot of `entry` on `node` from grant to registration at
    /// `clock`.
    #[staticmethod]
    #[pyo3(signature = (pilot_id, node, entry, policy, clock = 0))]
    fn register(
        pilot_id: &str,
        node: &Bound<'_, PyAny>,
        entry: &Bound<'_, PyAny>,
        policy: &Bound<'_, PyAny>,
        clock: u64,
    ) -> PyResult<Self> {
        let node: NodeSpec = from_py(node)?;
        let entry: FactoryEntry = from_py(entry)?;
        let policy: SitePolicy = from_py(policy)?;
        let mut pilot = Pilot::queued(pilot_id, &entry, clock);
        pilot
            .transition(PilotState::Starting, clock)
            .map_err(value_error)?;
        let slot =
            SlotState::register(&mut pilot, &node, &entry, &policy, clock).map_err(value_error)?;
        Ok(PySlot { slot, policy })
    }

    /// Advances the slot's hold-window and walltime state to `clock`; returns
    /// the changes as text.
    fn tick(&mut self, clock: u64) -> Vec<String> {
        sitesim::slot_tick(&mut self.slot, &self.policy, clock)
            .into_iter()
            .map(|c| format!("{:?}", c))
            .collect()
    }

    /// Claims room for `job`; returns the GPU uuids handed out, or None if it
    /// does not fit.
    fn carve(&mut self, job: &Bound<'_, PyAny>, clock: u64) -> PyResult<Option<Vec<String>>> {
        let job: JobAd = from_py(job)?;
        Ok(self.slot.carve(&job, clock).map(|c| c.gpu_uuids))
    }

    fn release(&mut self, job_id: &str) -> bool {
        self.slot.release(job_id).is_some()
    }

    #[getter]
    fn slot_id(&self) -> String {
        self.slot.slot_id.clone()
    }

    #[getter]
    fn free_cpus(&self) -> u32 {
        self.slot.free_cpus
    }

    #[getter]
    fn free_memory_mb(&self) -> u64 {
        self.slot.free_memory_mb
    }

    #[getter]
    fn free_gpu_uuids(&self) -> Vec<String> {
        self.slot.free_gpu_uuids.iter().cloned().collect()
    }

    #[getter]
    fn accepts_claims(&self) -> bool {
        self.slot.accepts_claims()
    }

    #[getter]
    fn ad(&self) -> PyClassAd {
        PyClassAd(self.slot.parent_ad.clone())
    }
}

/// One negotiation cycle over `jobs` (dicts) and `slots`; the slots are
/// not modified.
#[pyfunction]
#[pyo3(signature = (jobs, slots, clock = 0))]
fn negotiate<'py>(
    py: Python<'py>,
    jobs: &Bound<'_, PyAny>,
    slots: Vec<PyRef<'_, PySlot>>,
    clock: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let jobs: Vec<JobAd> = from_py(jobs)?;
    let slots: Vec<SlotState> = slots.iter().map(|s| s.slot.clone()).collect();
    to_py(py, &negotiator::negotiate(&jobs, &slots, clock))
}

#[pyclass(name = "Scenario", module = "pyglidepool")]
struct PyScenario(ScenarioConfig);

#[pymethods]
impl PyScenario {
    /// Loads a scenario file; XML entries are resolved next to it.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ScenarioConfig::from_path(&path)
            .map(PyScenario)
            .map_err(value_error)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(PyScenario)
            .map_err(value_error)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(value_error)
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
    fn duration_secs(&self) -> u64 {
        self.0.duration_secs
    }

    #[setter]
    fn set_duration_secs(&mut self, secs: u64) {
        self.0.duration_secs = secs;
    }

    /// Every violation as a (path, message) pair; empty when valid.
    fn validate(&self) -> Vec<(String, String)> {
        match self.0.validate() {
            Ok(()) => Vec::new(),
            Err(e) => e.0.into_iter().map(|v| (v.path, v.message)).collect(),
        }
    }

    fn run(&self, py: Python<'_>) -> PyResult<PyRun> {
        let config = self.0.clone();
        let (log, metrics) = py
            .detach(move || engine::run(&config))
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyRun { log, metrics })
    }
}

/// Result of a simulation run.
#[pyclass(frozen, name = "Run", module = "pyglidepool")]
struct PyRun {
    log: EventLog,
    metrics: engine::Metrics,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.metrics)
    }

    #[getter]
    fn events<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.log)
    }

    fn __len__(&self) -> usize {
        self.log.len()
    }

    fn events_jsonl(&self) -> String {
        self.log.to_jsonl()
    }

    fn catalogue<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &engine::gpu_catalogue(&self.log))
    }

    fn catalogue_csv(&self) -> String {
        engine::catalogue_csv(&engine::gpu_catalogue(&self.log))
    }
}

/// GPU catalogue CSV of an events.jsonl text.
#[pyfunction]
fn catalogue_from_jsonl(text: &str) -> PyResult<String> {
    let log = EventLog::read_jsonl(text.as_bytes())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(engine::catalogue_csv(&engine::gpu_catalogue(&log)))
}

#[pymodule]
fn pyglidepool(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExpression>()?;
    m.add_class::<PyClassAd>()?;
    m.add_class::<ErrorValue>()?;
    m.add_class::<PySlot>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(parse_expression, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_match, m)?)?;
    m.add_function(wrap_pyfunction!(parse_factory_entry_xml, m)?)?;
    m.add_function(wrap_pyfunction!(factory_entry_to_xml, m)?)?;
    m.add_function(wrap_pyfunction!(classify_gpu_use, m)?)?;
    m.add_function(wrap_pyfunction!(static_entry_compat, m)?)?;
    m.add_function(wrap_pyfunction!(build_job_ad, m)?)?;
    m.add_function(wrap_pyfunction!(fe_cycle, m)?)?;
    m.add_function(wrap_pyfunction!(negotiate, m)?)?;
    m.add_function(wrap_pyfunction!(catalogue_from_jsonl, m)?)?;
    m.add("CATALOGUE_HEADER", engine::CATALOGUE_HEADER)?;
    Ok(())
}
