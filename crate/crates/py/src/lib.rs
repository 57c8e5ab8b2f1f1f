//! Python bindings: demonstration generation, training, sub-task validation
//! and episode execution. Structured results come back as plain dicts and
//! lists (decoded from the same JSON the CLI prints).

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use demonstrate::benchmark::{run_benchmark, BenchTask};
use demonstrate::config::Config;
use demonstrate::demos::{generate_demoset, load_demoset, save_demoset, synthetic_obstacle};
use demonstrate::embedding::{EmbeddingProvider, MockEmbedder};
use demonstrate::execute::Pipeline;
use demonstrate::language::{make_planner, LearnedDesigner};
use demonstrate::model::{sha256_hex, LearnedModel};
use demonstrate::sim::{spawn_scene, Vec3};
use demonstrate::training::train_model;
use demonstrate::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::Dimension { .. }
        | Error::Config(_)
        | Error::Format { .. }
        | Error::Version { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn config(path: Option<PathBuf>) -> PyResult<Config> {
    Config::load_or_default(path.as_deref()).map_err(to_py)
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

/// A trained model plus the embedding provider it was trained with.
#[pyclass(module = "demonstrate_py")]
struct Model {
    inner: LearnedModel,
    embedder: Box<dyn EmbeddingProvider>,
    cfg: Config,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<PathBuf>) -> PyResult<Self> {
        let cfg = self::config(config)?;
        let inner = LearnedModel::load(&path).map_err(to_py)?;
        let embedder = cfg.embedding.provider().map_err(to_py)?;
        if embedder.id() != inner.embedder_id {
            return Err(PyValueError::new_err(format!(
                "model was trained with embedder {:?}, configuration provides {:?}",
                inner.embedder_id,
                embedder.id()
            )));
        }
        Ok(Self { inner, embedder, cfg })
    }

    #[getter]
    fn z(&self) -> usize {
        self.inner.z()
    }

    #[getter]
    fn s(&self) -> usize {
        self.inner.s()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn examples(&self) -> Vec<String> {
        self.inner.example_texts.clone()
    }

    /// Learned constraint parameters as a flat list, if any.
    #[getter]
    fn rho(&self) -> Option<Vec<f64>> {
        self.inner.rho.map(|r| r.to_vec())
    }

    /// `(coverage, residual, passed)` of one sub-task description.
    #[pyo3(signature = (text, threshold=None))]
    fn validate(&self, text: &str, threshold: Option<f64>) -> PyResult<(f64, f64, bool)> {
        let e = self.embedder.embed_one(text).map_err(to_py)?;
        let c = self
            .inner
            .coverage_gate()
            .and_then(|g| g.evaluate(&e.values))
            .map_err(to_py)?;
        let t = threshold.unwrap_or(self.cfg.validation.threshold);
        Ok((c.coverage, c.residual, c.coverage <= t && c.residual <= self.cfg.validation.residual))
    }

    /// Per-task cost parameters θ predicted for a description.
    fn theta(&self, text: &str) -> PyResult<Vec<f64>> {
        let e = self.embedder.embed_one(text).map_err(to_py)?;
        let z = self.inner.pca.project(&e.values).map_err(to_py)?;
        let theta = self.inner.mapping.forward(&z).map_err(to_py)?;
        Ok(theta.iter().copied().collect())
    }

    /// Solve the designed OCP from `ee` among `objects`; returns the
    /// end-effector positions of the optimal trajectory.
    fn solve(&self, text: &str, objects: Vec<[f64; 3]>, ee: [f64; 3]) -> PyResult<Vec<[f64; 3]>> {
        let objects: Vec<Vec3> = objects.iter().map(|o| Vec3::from(*o)).collect();
        let x0 = demonstrate::sim::ContState::at_rest(Vec3::from(ee));
        let spec = demonstrate::language::design_ocp(text, &self.inner, self.embedder.as_ref(), &objects, x0)
            .map_err(to_py)?;
        let r = demonstrate::ocp::solve_ocp(&spec, &self.cfg.solver).map_err(to_py)?;
        Ok(r.trajectory.states.iter().map(|s| [s.pos.x, s.pos.y, s.pos.z]).collect())
    }

    /// Plan, validate and execute `command` on the seeded scene.
    #[pyo3(signature = (command, seed=0))]
    fn run<'py>(&self, py: Python<'py>, command: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let planner = make_planner(&self.cfg.planner);
        let designer = LearnedDesigner {
            model: &self.inner,
            embedder: self.embedder.as_ref(),
        };
        let gate = self.inner.coverage_gate().map_err(to_py)?;
        let pipe = Pipeline {
            planner: planner.as_ref(),
            designer: &designer,
            embedder: self.embedder.as_ref(),
            gate: &gate,
            sim: &self.cfg.sim,
            solver: &self.cfg.solver,
            validation: &self.cfg.validation,
            execution: &self.cfg.execution,
        };
        let scene = spawn_scene(self.cfg.demos.layout, seed, &self.cfg.sim);
        let ep = pipe.run(command, &scene).map_err(to_py)?;
        let v = serde_json::to_value(&ep).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        json_to_py(py, &v)
    }

    /// Benchmark report for `task` (`stack`, `pyramid` or `l_shape`).
    #[pyo3(signature = (task, runs=1, seed=0))]
    fn benchmark<'py>(&self, py: Python<'py>, task: &str, runs: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let task: BenchTask = task.parse().map_err(to_py)?;
        let planner = make_planner(&self.cfg.planner);
        let designer = LearnedDesigner {
            model: &self.inner,
            embedder: self.embedder.as_ref(),
        };
        let gate = self.inner.coverage_gate().map_err(to_py)?;
        let pipe = Pipeline {
            planner: planner.as_ref(),
            designer: &designer,
            embedder: self.embedder.as_ref(),
            gate: &gate,
            sim: &self.cfg.sim,
            solver: &self.cfg.solver,
            validation: &self.cfg.validation,
            execution: &self.cfg.execution,
        };
        let (report, _) = run_benchmark(task, runs, seed, &pipe, &self.cfg.oracle(), &self.cfg).map_err(to_py)?;
        let v = serde_json::to_value(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        json_to_py(py, &v)
    }
}

/// Mock embedding of `text` (64 channels).
#[pyfunction]
fn embed_mock(text: &str) -> Vec<f64> {
    MockEmbedder::embed_text(text)
}

/// Write a demonstration set; returns the number of sub-tasks.
#[pyfunction]
#[pyo3(signature = (out, tasks=90, per_task=20, seed=0, obstacle=false, config=None))]
fn generate_demos(
    out: PathBuf,
    tasks: usize,
    per_task: usize,
    seed: u64,
    obstacle: bool,
    config: Option<PathBuf>,
) -> PyResult<usize> {
    let cfg = self::config(config)?;
    let mut dc = cfg.demos.clone();
    dc.tasks = tasks;
    dc.per_task = per_task;
    if obstacle && dc.obstacle.is_none() {
        dc.obstacle = Some(synthetic_obstacle());
    }
    let set = generate_demoset(&cfg.oracle(), &dc, seed).map_err(to_py)?;
    save_demoset(&set, &out).map_err(to_py)?;
    Ok(set.examples.len())
}

/// Train from a demonstration file and save the model; returns the loss curve.
#[pyfunction]
#[pyo3(signature = (demos, out, z=None, config=None))]
fn train(demos: PathBuf, out: PathBuf, z: Option<usize>, config: Option<PathBuf>) -> PyResult<Vec<f64>> {
    let mut cfg = self::config(config)?;
    if let Some(z) = z {
        cfg.embedding.z = z;
    }
    let bytes = std::fs::read(&demos).map_err(|e| to_py(e.into()))?;
    let set = load_demoset(&demos).map_err(to_py)?;
    let embedder = cfg.embedding.provider().map_err(to_py)?;
    let report = train_model(&set, embedder.as_ref(), &cfg, &sha256_hex(&bytes)).map_err(to_py)?;
    report.model.save(&out).map_err(to_py)?;
    Ok(report.loss_curve)
}

#[pymodule]
fn demonstrate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(embed_mock, m)?)?;
    m.add_function(wrap_pyfunction!(generate_demos, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
