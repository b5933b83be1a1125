//! Python bindings: scenarios, stacks, episodes, attacks and evolution.
//!
//! Structured results (metrics, reports, schemas) cross the boundary as JSON and
//! come back as plain Python dicts and lists.

use std::path::PathBuf;

use adsandbox::attacks::{run_attack, AttackConfig, AttackMethod};
use adsandbox::harness::record::EpisodeRecord;
use adsandbox::harness::session::session_schema;
use adsandbox::harness::{self, compute_metrics, EpisodeOptions, Executor, HilExecutor, SilExecutor, DEFAULT_TIMEOUT};
use adsandbox::scenario::{self, EvolutionConfig, Proposer, ScenarioSpec};
use adsandbox::stack::model::Model;
use adsandbox::stack::zoo::{classifier_spec, default_camera};
use adsandbox::stack::{ModularStack, TrainRecipe};
use adsandbox::world::{render_sensor, SensorFrame};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Scenario", module = "adsandbox_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: ScenarioSpec,
}

#[pymethods]
impl PyScenario {
    /// Built-in scenario name or path to a scenario JSON file.
    #[staticmethod]
    fn resolve(name: &str) -> PyResult<Self> {
        let inner = ScenarioSpec::resolve(name).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = ScenarioSpec::from_json(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn builtin_names() -> Vec<&'static str> {
        scenario::spec::builtin_names().to_vec()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn agent_count(&self) -> usize {
        self.inner.agents.len()
    }

    #[getter]
    fn episode_ticks(&self) -> u64 {
        self.inner.episode_ticks
    }

    /// Copy with a different seed and, optionally, tick limit.
    #[pyo3(signature = (seed, episode_ticks=None))]
    fn with_seed(&self, seed: u64, episode_ticks: Option<u64>) -> Self {
        let mut inner = self.inner.clone();
        inner.seed = seed;
        if let Some(t) = episode_ticks {
            inner.episode_ticks = t;
        }
        Self { inner }
    }

    /// Camera frame of the initial state as `(width, height, rgb)` with values in [0, 1].
    fn render(&self) -> PyResult<(usize, usize, Vec<f64>)> {
        let world = self.inner.build_world().map_err(value_err)?;
        let f = render_sensor(&world, &default_camera()).map_err(runtime_err)?;
        Ok((f.width, f.height, f.pixels))
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, agents={})", self.inner.name, self.inner.agents.len())
    }
}

#[pyclass(name = "Stack", module = "adsandbox_py", frozen)]
struct PyStack {
    inner: ModularStack,
}

#[pymethods]
impl PyStack {
    #[staticmethod]
    #[pyo3(signature = (seed=1))]
    fn untrained(seed: u64) -> PyResult<Self> {
        let m = Model::init(classifier_spec(), seed).map_err(runtime_err)?;
        Ok(Self { inner: ModularStack::new(m) })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ModularStack::load(&dir).map_err(value_err)?,
        })
    }

    /// Trains the classifier from scratch. Defaults reproduce the reference stack.
    /// Returns the stack and its training accuracy.
    #[staticmethod]
    #[pyo3(signature = (frames=None, dataset_seed=None, epochs=None, lr=None))]
    fn train(
        py: Python<'_>,
        frames: Option<usize>,
        dataset_seed: Option<u64>,
        epochs: Option<usize>,
        lr: Option<f64>,
    ) -> PyResult<(Self, f64)> {
        let d = TrainRecipe::default();
        let recipe = TrainRecipe {
            frames: frames.unwrap_or(d.frames),
            dataset_seed: dataset_seed.unwrap_or(d.dataset_seed),
            epochs: epochs.unwrap_or(d.epochs),
            lr: lr.unwrap_or(d.lr),
            ..d
        };
        let (m, report) = py.detach(|| recipe.train_classifier(&default_camera())).map_err(runtime_err)?;
        Ok((Self { inner: ModularStack::new(m) }, report.final_accuracy.unwrap_or(f64::NAN)))
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(runtime_err)
    }

    /// Class probabilities (none, car, truck, pedestrian) for an RGB frame.
    fn predict(&self, width: usize, height: usize, rgb: Vec<f64>) -> PyResult<Vec<f64>> {
        let frame = SensorFrame::from_pixels(width, height, rgb).map_err(value_err)?;
        Ok(self.inner.classifier.predict(&frame).map_err(value_err)?.values())
    }
}

#[pyclass(name = "Record", module = "adsandbox_py", frozen)]
struct PyRecord {
    inner: EpisodeRecord,
}

#[pymethods]
impl PyRecord {
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: EpisodeRecord::from_jsonl(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EpisodeRecord::load(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn __len__(&self) -> usize {
        self.inner.ticks.len()
    }

    #[getter]
    fn termination<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.summary.termination)
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &compute_metrics(&self.inner))
    }

    /// Ego trajectory as a list of `(x, y, heading, speed)` per tick.
    fn ego_trajectory(&self) -> Vec<(f64, f64, f64, f64)> {
        self.inner.ticks.iter().map(|t| (t.ego.x, t.ego.y, t.ego.heading, t.ego.speed)).collect()
    }

    /// Re-simulates the record; the report's `first_divergence` is `None` on a match.
    fn replay<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| harness::replay(&self.inner)).map_err(runtime_err)?;
        to_py(py, &report)
    }
}

/// Runs one closed-loop episode. `executor` is `"sil"` or `"hil:HOST:PORT"`.
#[pyfunction]
#[pyo3(signature = (scenario, stack, label="default", executor="sil"))]
fn run_episode(py: Python<'_>, scenario: &PyScenario, stack: &PyStack, label: &str, executor: &str) -> PyResult<PyRecord> {
    let mut ex: Box<dyn Executor> = match executor {
        "sil" => Box::new(SilExecutor),
        other => match other.strip_prefix("hil:") {
            Some(addr) => Box::new(HilExecutor::connect(addr, DEFAULT_TIMEOUT).map_err(runtime_err)?),
            None => return Err(value_err(format!("unknown executor {other:?}"))),
        },
    };
    let opts = EpisodeOptions {
        label: label.into(),
        ..Default::default()
    };
    let (record, _) = py
        .detach(|| harness::run_episode(&scenario.inner, &stack.inner, ex.as_mut(), &opts))
        .map_err(runtime_err)?;
    Ok(PyRecord { inner: record })
}

/// Perturbs an RGB frame against the stack's classifier and returns the new pixels.
#[pyfunction]
#[pyo3(signature = (stack, width, height, rgb, label, method="pgd", epsilon=0.1, alpha=0.01, steps=10, seed=0))]
#[allow(clippy::too_many_arguments)]
fn attack(
    py: Python<'_>,
    stack: &PyStack,
    width: usize,
    height: usize,
    rgb: Vec<f64>,
    label: usize,
    method: &str,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let method = AttackMethod::parse(method).ok_or_else(|| value_err(format!("unknown attack {method:?}")))?;
    let cfg = AttackConfig {
        alpha,
        steps,
        seed,
        ..AttackConfig::new(method, epsilon)
    };
    let frame = SensorFrame::from_pixels(width, height, rgb).map_err(value_err)?;
    let adv = py.detach(|| run_attack(&stack.inner.classifier, &frame, label, &cfg)).map_err(value_err)?;
    Ok(adv.pixels)
}

/// Evolves `scenario` toward higher risk with the heuristic proposer. Returns the
/// evolved scenario and a summary dict.
#[pyfunction]
#[pyo3(signature = (scenario, stack, iterations=20, seed=0, n_background=1))]
fn evolve<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    stack: &PyStack,
    iterations: usize,
    seed: u64,
    n_background: usize,
) -> PyResult<(PyScenario, Bound<'py, PyAny>)> {
    let cfg = EvolutionConfig {
        iterations,
        seed,
        n_background,
        ..Default::default()
    };
    let result = py
        .detach(|| scenario::evolve(&scenario.inner, &stack.inner, &cfg, &Proposer::Heuristic, &mut SilExecutor, &EpisodeOptions::default()))
        .map_err(runtime_err)?;
    let summary = serde_json::json!({
        "adversary": result.adversary,
        "seed_report": result.seed_report,
        "best_report": result.best_report,
        "accepted_objectives": result.accepted_objectives(),
    });
    Ok((PyScenario { inner: result.scenario }, to_py(py, &summary)?))
}

/// JSON schema of the interactive session protocol.
#[pyfunction(name = "session_schema")]
fn py_session_schema(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &session_schema())
}

#[pymodule]
fn adsandbox_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyStack>()?;
    m.add_class::<PyRecord>()?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    m.add_function(wrap_pyfunction!(py_session_schema, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyo3::types::PyModule;

    #[test]
    fn module_runs_an_episode_from_python() {
        Python::initialize();
        Python::attach(|py| {
            let m = PyModule::new(py, "adsandbox_py").unwrap();
            adsandbox_py(&m).unwrap();
            for name in ["Scenario", "Stack", "Record", "run_episode", "attack", "evolve", "session_schema"] {
                assert!(m.hasattr(name).unwrap(), "{name}");
            }
            let scenario = m.getattr("Scenario").unwrap().call_method1("resolve", ("ego_only",)).unwrap();
            let stack = m.getattr("Stack").unwrap().call_method0("untrained").unwrap();
            let rec = m.getattr("run_episode").unwrap().call1((scenario, stack)).unwrap();
            let metrics = rec.call_method0("metrics").unwrap();
            let completion: f64 = metrics.get_item("route_completion").unwrap().extract().unwrap();
            assert_eq!(completion, 1.0);
            let err = m.getattr("Scenario").unwrap().call_method1("resolve", ("no_such",)).unwrap_err();
            assert!(err.is_instance_of::<PyValueError>(py));
        });
    }
}
