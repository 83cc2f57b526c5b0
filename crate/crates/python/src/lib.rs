//! Python access to the lattice game, the experiment runner and the traffic
//! testbed. Configs are the same TOML files the CLI reads.

use std::path::PathBuf;

use homo_socialis::evolution;
use homo_socialis::experiments::{self, ExperimentConfig};
use homo_socialis::game::{self, Action, AgentClass, Friendliness};
use homo_socialis::metrics::{self, StepStats};
use homo_socialis::traffic::{self, Strategy};
use homo_socialis::world::GridWorld;
use homo_socialis::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand_chacha::ChaCha8Rng;

fn err(e: Error) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn load(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<ExperimentConfig> {
    ExperimentConfig::load_with_overrides(config.as_deref(), &overrides).map_err(err)
}

fn rho(value: f64) -> PyResult<Friendliness> {
    Friendliness::new(value).map_err(err)
}

fn action_name(a: Action) -> &'static str {
    match a {
        Action::Cooperate => "cooperate",
        Action::Defect => "defect",
    }
}

fn stats_dict<'py>(py: Python<'py>, s: &StepStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", s.step)?;
    d.set_item("mean_rho", s.mean_rho)?;
    d.set_item("coop_fraction", s.coop_fraction)?;
    d.set_item("mean_payoff_coop", s.mean_payoff_coop)?;
    d.set_item("mean_payoff_def", s.mean_payoff_def)?;
    d.set_item("n_coop", s.n_coop)?;
    d.set_item("n_def", s.n_def)?;
    d.set_item("family_counts", s.family_counts.clone())?;
    Ok(d)
}

/// Prisoner's dilemma payoffs.
#[pyclass(name = "PayoffMatrix", skip_from_py_object)]
#[derive(Clone)]
struct PyPayoffMatrix {
    inner: game::PayoffMatrix,
}

#[pymethods]
impl PyPayoffMatrix {
    #[new]
    #[pyo3(signature = (temptation=1.1, reward=1.0, punishment=0.0, sucker=-1.0))]
    fn new(temptation: f64, reward: f64, punishment: f64, sucker: f64) -> PyResult<Self> {
        let inner = game::PayoffMatrix::new(temptation, reward, punishment, sucker).map_err(err)?;
        Ok(PyPayoffMatrix { inner })
    }

    #[getter]
    fn temptation(&self) -> f64 {
        self.inner.temptation
    }
    #[getter]
    fn reward(&self) -> f64 {
        self.inner.reward
    }
    #[getter]
    fn punishment(&self) -> f64 {
        self.inner.punishment
    }
    #[getter]
    fn sucker(&self) -> f64 {
        self.inner.sucker
    }

    /// Friendliness above which a lone agent cooperates with a cooperator.
    fn lower_threshold(&self) -> f64 {
        self.inner.lower_threshold()
    }

    /// Friendliness above which a lone agent cooperates with a defector.
    fn upper_threshold(&self) -> f64 {
        self.inner.upper_threshold()
    }

    fn __repr__(&self) -> String {
        let m = &self.inner;
        format!("PayoffMatrix(T={}, R={}, P={}, S={})", m.temptation, m.reward, m.punishment, m.sucker)
    }
}

fn matrix(m: Option<PyRef<'_, PyPayoffMatrix>>) -> game::PayoffMatrix {
    m.map(|m| m.inner).unwrap_or_default()
}

/// "cooperate" or "defect" given `cooperating` of `neighbors` partners
/// cooperate.
#[pyfunction]
#[pyo3(signature = (cooperating, neighbors, rho_value, matrix_=None))]
fn best_response(
    cooperating: usize,
    neighbors: usize,
    rho_value: f64,
    matrix_: Option<PyRef<'_, PyPayoffMatrix>>,
) -> PyResult<&'static str> {
    let a = game::best_response(cooperating, neighbors, rho(rho_value)?, &matrix(matrix_)).map_err(err)?;
    Ok(action_name(a))
}

#[pyfunction]
#[pyo3(signature = (cooperating, neighbors, rho_value, matrix_=None))]
fn cooperation_gain(
    cooperating: usize,
    neighbors: usize,
    rho_value: f64,
    matrix_: Option<PyRef<'_, PyPayoffMatrix>>,
) -> PyResult<f64> {
    if neighbors == 0 || cooperating > neighbors {
        return Err(PyValueError::new_err("need 0 <= cooperating <= neighbors and neighbors >= 1"));
    }
    Ok(game::cooperation_gain(cooperating, neighbors, rho(rho_value)?, &matrix(matrix_)))
}

#[pyfunction]
#[pyo3(signature = (rho_value, matrix_=None))]
fn classify(rho_value: f64, matrix_: Option<PyRef<'_, PyPayoffMatrix>>) -> PyResult<&'static str> {
    Ok(match game::classify(rho(rho_value)?, &matrix(matrix_)) {
        AgentClass::SelfRegarding => "self_regarding",
        AgentClass::ConditionalCooperator => "conditional_cooperator",
        AgentClass::Idealist => "idealist",
    })
}

/// A lattice population advanced one step at a time.
///
/// Uses the same random stream as a CLI run with the same seed and
/// replicate, so `stats()` matches that run's stats.csv row for row.
#[pyclass(name = "Simulation")]
struct Simulation {
    config: ExperimentConfig,
    world: GridWorld,
    rng: ChaCha8Rng,
    history: Vec<StepStats>,
    extinct: bool,
}

#[pymethods]
impl Simulation {
    #[new]
    #[pyo3(signature = (config=None, overrides=Vec::new(), seed=None, replicate=0))]
    fn new(config: Option<PathBuf>, overrides: Vec<String>, seed: Option<u64>, replicate: u64) -> PyResult<Self> {
        let config = load(config, overrides)?;
        let seed = seed.unwrap_or(config.run.seed);
        let mut rng = experiments::replicate_rng(seed, replicate);
        let w = &config.world;
        let world = GridWorld::populate(w.width, w.height, w.occupancy, &w.families, &mut rng).map_err(err)?;
        Ok(Simulation { config, world, rng, history: Vec::new(), extinct: false })
    }

    /// Plays `n` steps; returns the statistics of the last round played.
    /// Stops early if the population dies out.
    #[pyo3(signature = (n=1))]
    fn step<'py>(&mut self, py: Python<'py>, n: u64) -> PyResult<Option<Bound<'py, PyDict>>> {
        for _ in 0..n {
            if self.extinct {
                break;
            }
            let t = self.history.len() as u64;
            match evolution::step(&mut self.world, &self.config.evolution, &mut self.rng, t) {
                Ok(s) => self.history.push(s),
                Err(Error::Extinction { .. }) => {
                    evolution::play_round(&mut self.world, &self.config.evolution.matrix);
                    self.history.push(metrics::summarize(&self.world, t));
                    self.extinct = true;
                }
                Err(e) => return Err(err(e)),
            }
        }
        self.history.last().map(|s| stats_dict(py, s)).transpose()
    }

    #[getter]
    fn steps_done(&self) -> usize {
        self.history.len()
    }

    #[getter]
    fn population(&self) -> usize {
        self.world.population()
    }

    #[getter]
    fn extinct(&self) -> bool {
        self.extinct
    }

    fn mean_rho(&self) -> Option<f64> {
        self.world.mean_rho()
    }

    /// Every recorded round, oldest first.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.history.iter().map(|s| stats_dict(py, s)).collect()
    }

    /// Rows of cell codes: -1 empty, else 2 * family index + 1 if cooperating.
    fn cell_codes(&self) -> Vec<Vec<i32>> {
        self.world.cell_codes()
    }

    /// Cooperator clusters as (size, family ids, mixed_family), largest first.
    fn clusters(&self) -> Vec<(usize, Vec<u32>, bool)> {
        metrics::cooperation_clusters(&self.world)
            .into_iter()
            .map(|c| (c.size, c.families.into_iter().collect(), c.mixed_family))
            .collect()
    }
}

/// Runs one replicate to the configured length and summarizes it.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new(), seed=None, replicate=0))]
fn run<'py>(
    py: Python<'py>,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    seed: Option<u64>,
    replicate: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load(config, overrides)?;
    let seed = seed.unwrap_or(cfg.run.seed);
    let t = py.detach(|| experiments::run_replicate(&cfg, seed, replicate)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("seed", seed)?;
    d.set_item("replicate", replicate)?;
    d.set_item("extinction_step", t.extinction)?;
    d.set_item("crossover_step", t.crossover(cfg.run.crossover_window))?;
    let window = t.final_window(cfg.run.final_window);
    d.set_item("final_coop", window.map(|w| w.0))?;
    d.set_item("final_rho", window.map(|w| w.1))?;
    d.set_item("mixed_family_cluster", t.final_clusters().iter().any(|c| c.mixed_family))?;
    let stats: Vec<Bound<'py, PyDict>> = t.stats.iter().map(|s| stats_dict(py, s)).collect::<PyResult<_>>()?;
    d.set_item("stats", stats)?;
    Ok(d)
}

/// Ascending then descending friendliness sweep as (rho, direction,
/// coop_fraction) rows.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new()))]
fn hysteresis(py: Python<'_>, config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Vec<(f64, String, f64)>> {
    let cfg = load(config, overrides)?;
    let rows = py.detach(|| experiments::hysteresis_sweep(&cfg)).map_err(err)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            let dir = match r.direction {
                experiments::Direction::Ascending => "ascending",
                experiments::Direction::Descending => "descending",
            };
            (r.rho, dir.to_string(), r.coop_fraction)
        })
        .collect())
}

/// One grid run; returns avg_total_queue, avg_wait and blocked_count.
#[pyfunction]
#[pyo3(signature = (strategy, utilization, seed=0, config=None, overrides=Vec::new()))]
fn simulate_traffic<'py>(
    py: Python<'py>,
    strategy: &str,
    utilization: f64,
    seed: u64,
    config: Option<PathBuf>,
    overrides: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let s: Strategy = strategy.parse().map_err(err)?;
    let cfg = load(config, overrides)?;
    let r = py
        .detach(|| traffic::simulate_traffic(&cfg.traffic, s, utilization, seed))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("strategy", r.strategy.name())?;
    d.set_item("utilization", r.utilization)?;
    d.set_item("seed", r.seed)?;
    d.set_item("avg_total_queue", r.avg_total_queue)?;
    d.set_item("avg_wait", r.avg_wait)?;
    d.set_item("blocked_count", r.blocked_count)?;
    Ok(d)
}

#[pymodule]
fn socialis(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPayoffMatrix>()?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(best_response, m)?)?;
    m.add_function(wrap_pyfunction!(cooperation_gain, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(hysteresis, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_traffic, m)?)?;
    m.add("STRATEGIES", Strategy::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    Ok(())
}
