//! Offline trajectory data: loading, validation, and subset sampling.
//!
//! Trajectories arrive as JSON lines, one object per trajectory with
//! parallel `states`, `actions`, and `rewards` arrays. For scoring, only
//! the visited states matter; they are flattened into a [`StateDataset`]
//! in file order, duplicates included, and sampled into fixed index
//! subsets by a seeded [`SubsetPlan`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::seeds;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid trajectory JSON: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {msg}")]
    InvalidTrajectory {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("no trajectories in {path}")]
    EmptyFile { path: String },
    #[error("subset size {subset_size} exceeds dataset size {n}")]
    SubsetTooLarge { subset_size: usize, n: usize },
    #[error("{what} must be at least 1")]
    ZeroParam { what: &'static str },
    #[error("discount factor must be in [0, 1], got {0}")]
    BadGamma(f64),
}

type Result<T> = std::result::Result<T, DataError>;

/// One episode: step `t` holds the state visited, the action taken there,
/// and the reward received. All three arrays have equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    /// Number of recorded steps.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    /// Discounted return `sum_t gamma^t r_t` over the recorded steps.
    pub fn discounted_return(&self, gamma: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(DataError::BadGamma(gamma));
        }
        let mut acc = 0.0;
        let mut factor = 1.0;
        for &r in &self.rewards {
            acc += factor * r;
            factor *= gamma;
        }
        Ok(acc)
    }

    /// Checks internal consistency; the loader calls this per line.
    fn validate(&self) -> std::result::Result<(), String> {
        if self.states.is_empty() {
            return Err("trajectory has no steps".into());
        }
        if self.states.len() != self.actions.len() || self.states.len() != self.rewards.len() {
            return Err(format!(
                "lengths differ: {} states, {} actions, {} rewards",
                self.states.len(),
                self.actions.len(),
                self.rewards.len()
            ));
        }
        let sd = self.state_dim();
        let ad = self.action_dim();
        if sd == 0 || ad == 0 {
            return Err("states and actions must have at least one dimension".into());
        }
        for (t, s) in self.states.iter().enumerate() {
            if s.len() != sd {
                return Err(format!("state {t} has width {}, expected {sd}", s.len()));
            }
        }
        for (t, a) in self.actions.iter().enumerate() {
            if a.len() != ad {
                return Err(format!("action {t} has width {}, expected {ad}", a.len()));
            }
        }
        let finite = self
            .states
            .iter()
            .flatten()
            .chain(self.actions.iter().flatten())
            .chain(self.rewards.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite value in trajectory".into());
        }
        Ok(())
    }
}

/// Reads a JSON-lines trajectory file. Blank lines are ignored; every
/// other line must parse and validate, and all trajectories must agree on
/// state and action dimensions.
pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out: Vec<Trajectory> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let traj: Trajectory =
            serde_json::from_str(&line).map_err(|source| DataError::Json {
                path: display.clone(),
                line: lineno,
                source,
            })?;
        traj.validate()
            .map_err(|msg| DataError::InvalidTrajectory {
                path: display.clone(),
                line: lineno,
                msg,
            })?;
        if let Some(first) = out.first() {
            if traj.state_dim() != first.state_dim() || traj.action_dim() != first.action_dim() {
                return Err(DataError::InvalidTrajectory {
                    path: display.clone(),
                    line: lineno,
                    msg: format!(
                        "dimensions ({}, {}) differ from first trajectory ({}, {})",
                        traj.state_dim(),
                        traj.action_dim(),
                        first.state_dim(),
                        first.action_dim()
                    ),
                });
            }
        }
        out.push(traj);
    }
    if out.is_empty() {
        return Err(DataError::EmptyFile { path: display });
    }
    Ok(out)
}

/// Writes trajectories as JSON lines, one per trajectory.
pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for traj in trajectories {
        serde_json::to_writer(&mut w, traj).map_err(|source| DataError::Json {
            path: display.clone(),
            line: 0,
            source,
        })?;
        w.write_all(b"\n").map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: display,
        source,
    })
}

/// Every state visited in the data, flattened row-major in file order.
/// Repeated visits to the same state stay repeated; the empirical state
/// distribution is the point of the dataset.
#[derive(Debug, Clone)]
pub struct StateDataset {
    states: Vec<f64>,
    dim: usize,
    n: usize,
}

impl StateDataset {
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Self {
        let dim = trajectories.first().map_or(0, |t| t.state_dim());
        let mut states = Vec::new();
        for traj in trajectories {
            for s in &traj.states {
                states.extend_from_slice(s);
            }
        }
        let n = if dim == 0 { 0 } else { states.len() / dim };
        Self { states, dim, n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.states
    }

    /// Flat row-major copy of the states at `indices`, in index order.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.state(i));
        }
        out
    }
}

/// Pre-sampled state subsets. Training iterates over them in order, and
/// inference averages model scores across them, so the plan is sampled
/// once up front and fixed by the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPlan {
    pub subset_size: usize,
    pub subsets: Vec<Vec<usize>>,
}

/// Samples `n_subsets` index sets of `subset_size` without replacement
/// from `0..n_states`. Each subset draws from its own derived stream, so
/// the plan is stable under parallel construction and under changes to
/// `n_subsets`.
pub fn plan_subsets(
    n_states: usize,
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<SubsetPlan> {
    if subset_size == 0 {
        return Err(DataError::ZeroParam {
            what: "subset_size",
        });
    }
    if n_subsets == 0 {
        return Err(DataError::ZeroParam { what: "n_subsets" });
    }
    if subset_size > n_states {
        return Err(DataError::SubsetTooLarge {
            subset_size,
            n: n_states,
        });
    }
    let subsets = (0..n_subsets)
        .map(|t| {
            let mut rng = seeds::stream(seed, &[seeds::tag::SUBSET_PLAN, t as u64]);
            rand::seq::index::sample(&mut rng, n_states, subset_size).into_vec()
        })
        .collect();
    Ok(SubsetPlan {
        subset_size,
        subsets,
    })
}
