//! Python bindings: the gridworld, dataset files, checkpoints and the
//! evaluation arithmetic.

use std::collections::BTreeMap;

use goalcraft::env::{self, Action, EnvConfig, Skill, WorldState};
use goalcraft::evaluation;
use goalcraft::inference;
use goalcraft::policy::ActionLogits;
use goalcraft::storage;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: goalcraft::Error) -> PyErr {
    match e {
        goalcraft::Error::Config(_) | goalcraft::Error::Invalid(_) | goalcraft::Error::Domain(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A single gridworld episode driven from Python.
#[pyclass]
struct World {
    state: WorldState,
}

#[pymethods]
impl World {
    #[new]
    #[pyo3(signature = (seed, config_json=None))]
    fn new(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(text) => serde_json::from_str::<EnvConfig>(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => EnvConfig::default(),
        };
        Ok(Self {
            state: env::generate_world(seed, &cfg).map_err(to_py)?,
        })
    }

    /// Applies `(move, turn)` indices and returns the emitted event tags.
    fn step(&mut self, mv: usize, turn: usize) -> PyResult<Vec<String>> {
        let a = Action::from_indices(mv, turn).map_err(to_py)?;
        Ok(self.state.apply(a).into_iter().map(|e| e.tag).collect())
    }

    /// Expert action `(move, turn)` for a skill in the current state.
    fn expert_action(&self, skill: &str) -> PyResult<(usize, usize)> {
        let skill: Skill = skill.parse().map_err(to_py)?;
        let a = env::scripted_policy(skill, &self.state);
        Ok((a.move_index(), a.turn_index()))
    }

    /// Flat `7 * 7 * 12` observation.
    fn frame(&self) -> Vec<f32> {
        env::render(&self.state).values
    }

    fn inventory(&self) -> BTreeMap<String, u32> {
        self.state.inventory.iter().map(|(r, n)| (r.name().to_string(), n)).collect()
    }

    #[getter]
    fn tick(&self) -> u64 {
        self.state.tick
    }
}

/// Writes `episodes` expert episodes per skill to an `MTRJ1` file.
#[pyfunction]
fn generate_dataset(path: &str, episodes: usize, episode_len: usize, seed: u64) -> PyResult<usize> {
    let data = env::generate_dataset(&Skill::ALL, episodes, episode_len, seed, &EnvConfig::default()).map_err(to_py)?;
    storage::write_trajectories(path, &data).map_err(to_py)?;
    Ok(data.len())
}

/// Per-trajectory summaries of an `MTRJ1` file.
#[pyfunction]
fn read_trajectories(path: &str) -> PyResult<Vec<BTreeMap<String, String>>> {
    let data = storage::read_trajectories(path).map_err(to_py)?;
    Ok(data
        .iter()
        .map(|t| {
            BTreeMap::from([
                ("len".to_string(), t.len().to_string()),
                ("seed".to_string(), t.seed.to_string()),
                ("skill".to_string(), t.skill_label.clone().unwrap_or_default()),
                ("labeled".to_string(), t.actions.is_some().to_string()),
                ("events".to_string(), t.events.len().to_string()),
            ])
        })
        .collect())
}

/// Step count and parameter names of an `MCKP1` checkpoint.
#[pyfunction]
fn checkpoint_info(path: &str) -> PyResult<(u64, Vec<String>)> {
    let ck = storage::read_checkpoint(path).map_err(to_py)?;
    Ok((ck.step, ck.params.names().map(str::to_string).collect()))
}

#[pyfunction]
fn win_probability(r_a: f64, r_b: f64) -> f64 {
    evaluation::win_probability(r_a, r_b)
}

#[pyfunction]
fn elo_update(r_a: f64, r_b: f64, k: f64, a_wins: bool) -> (f64, f64) {
    evaluation::elo_update(r_a, r_b, k, a_wins)
}

/// Guided combination of `(move, turn)` logit pairs.
#[pyfunction]
fn guided_logits(goal: (Vec<f64>, Vec<f64>), bias: (Vec<f64>, Vec<f64>), lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let wrap = |(m, t): (Vec<f64>, Vec<f64>)| ActionLogits {
        move_logits: m,
        turn_logits: t,
    };
    let out = inference::guided_logits(&wrap(goal), &wrap(bias), lambda);
    (out.move_logits, out.turn_logits)
}

#[pymodule]
fn goalcraft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<World>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_trajectories, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    m.add_function(wrap_pyfunction!(win_probability, m)?)?;
    m.add_function(wrap_pyfunction!(elo_update, m)?)?;
    m.add_function(wrap_pyfunction!(guided_logits, m)?)?;
    Ok(())
}
