//! Policies under evaluation: versioned JSON specs and deterministic
//! forward evaluation.
//!
//! A policy maps a state to an action. The scorer never looks inside;
//! everything downstream consumes only `(state, action)` pairs, so any
//! deterministic controller that fits the spec format can be ranked. Two
//! kinds are supported: a single linear map and a tanh feedforward
//! network, both with optional per-dimension action clipping.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numgrad::Tensor;

/// Format version this build reads and writes.
pub const POLICY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid policy JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported policy format version {got}; this build reads version {want}")]
    Version { got: u32, want: u32 },
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error("state has {got} values, policy expects {want}")]
    StateWidth { want: usize, got: usize },
}

type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Linear,
    Feedforward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// A deterministic policy. `weights[l]` is the layer-`l` matrix stored as
/// rows of output weights (`out x in`), applied as `a = W s + b`.
///
/// Linear policies have exactly one layer and no `hidden` sizes. A
/// feedforward policy with `hidden = [h1, .., hk]` has `k + 1` layers with
/// the activation applied after every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub version: u32,
    pub kind: PolicyKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub action_clip: Option<Vec<[f64; 2]>>,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl PolicySpec {
    /// A linear policy `a = clip(W s + b)` with `W` given as `out x in`
    /// rows.
    pub fn linear(
        weights: Vec<Vec<f64>>,
        biases: Vec<f64>,
        action_clip: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let action_dim = weights.len();
        let state_dim = weights.first().map_or(0, Vec::len);
        let spec = Self {
            version: POLICY_FORMAT_VERSION,
            kind: PolicyKind::Linear,
            state_dim,
            action_dim,
            weights: vec![weights],
            biases: vec![biases],
            hidden: Vec::new(),
            activation: Activation::Tanh,
            action_clip,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != POLICY_FORMAT_VERSION {
            return Err(PolicyError::Version {
                got: self.version,
                want: POLICY_FORMAT_VERSION,
            });
        }
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(PolicyError::Invalid(
                "state_dim and action_dim must be at least 1".into(),
            ));
        }
        let layer_sizes: Vec<usize> = match self.kind {
            PolicyKind::Linear => {
                if !self.hidden.is_empty() {
                    return Err(PolicyError::Invalid(
                        "linear policies take no hidden sizes".into(),
                    ));
                }
                vec![self.state_dim, self.action_dim]
            }
            PolicyKind::Feedforward => {
                if self.hidden.is_empty() {
                    return Err(PolicyError::Invalid(
                        "feedforward policies need at least one hidden size".into(),
                    ));
                }
                if self.hidden.contains(&0) {
                    return Err(PolicyError::Invalid("hidden sizes must be positive".into()));
                }
                let mut sizes = vec![self.state_dim];
                sizes.extend_from_slice(&self.hidden);
                sizes.push(self.action_dim);
                sizes
            }
        };
        let n_layers = layer_sizes.len() - 1;
        if self.weights.len() != n_layers || self.biases.len() != n_layers {
            return Err(PolicyError::Invalid(format!(
                "expected {n_layers} weight and bias layers, got {} and {}",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for l in 0..n_layers {
            let (n_in, n_out) = (layer_sizes[l], layer_sizes[l + 1]);
            if self.weights[l].len() != n_out {
                return Err(PolicyError::Invalid(format!(
                    "layer {l}: expected {n_out} weight rows, got {}",
                    self.weights[l].len()
                )));
            }
            if let Some(row) = self.weights[l].iter().find(|r| r.len() != n_in) {
                return Err(PolicyError::Invalid(format!(
                    "layer {l}: weight row has {} entries, expected {n_in}",
                    row.len()
                )));
            }
            if self.biases[l].len() != n_out {
                return Err(PolicyError::Invalid(format!(
                    "layer {l}: expected {n_out} biases, got {}",
                    self.biases[l].len()
                )));
            }
        }
        let finite = self
            .weights
            .iter()
            .flatten()
            .flatten()
            .chain(self.biases.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(PolicyError::Invalid("non-finite weight or bias".into()));
        }
        if let Some(clip) = &self.action_clip {
            if clip.len() != self.action_dim {
                return Err(PolicyError::Invalid(format!(
                    "action_clip has {} ranges, expected {}",
                    clip.len(),
                    self.action_dim
                )));
            }
            for &[lo, hi] in clip {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(PolicyError::Invalid(format!(
                        "bad clip range [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Evaluates the policy on one state.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(PolicyError::StateWidth {
                want: self.state_dim,
                got: state.len(),
            });
        }
        let n_layers = self.weights.len();
        let mut h = state.to_vec();
        for l in 0..n_layers {
            let mut next: Vec<f64> = self.weights[l]
                .iter()
                .zip(&self.biases[l])
                .map(|(row, &b)| row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + b)
                .collect();
            if l + 1 < n_layers {
                for v in &mut next {
                    *v = v.tanh();
                }
            }
            h = next;
        }
        if let Some(clip) = &self.action_clip {
            for (v, &[lo, hi]) in h.iter_mut().zip(clip) {
                *v = v.clamp(lo, hi);
            }
        }
        Ok(h)
    }

    /// Evaluates the policy on every row of a flat `n x state_dim` matrix,
    /// returning a flat `n x action_dim` matrix.
    pub fn act_all(&self, states: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(states.len() / self.state_dim * self.action_dim);
        for s in states.chunks(self.state_dim) {
            out.extend_from_slice(&self.act(s)?);
        }
        Ok(out)
    }
}

/// Loads and validates one policy file.
pub fn load_policy(path: &Path) -> Result<PolicySpec> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| PolicyError::Io {
        path: display.clone(),
        source,
    })?;
    let spec: PolicySpec =
        serde_json::from_reader(BufReader::new(file)).map_err(|source| PolicyError::Json {
            path: display,
            source,
        })?;
    spec.validate()?;
    Ok(spec)
}

/// Writes one policy file with a trailing newline.
pub fn save_policy(path: &Path, spec: &PolicySpec) -> Result<()> {
    spec.validate()?;
    let display = path.display().to_string();
    let file = File::create(path).map_err(|source| PolicyError::Io {
        path: display.clone(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, spec).map_err(|source| PolicyError::Json {
        path: display.clone(),
        source,
    })?;
    use std::io::Write;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|source| PolicyError::Io {
        path: display,
        source,
    })
}

/// Rows of `(state, policy_action)` for a state subset: the tokens the
/// scoring model consumes. Shape `n x (state_dim + action_dim)`, no
/// gradient.
pub fn build_representation(policy: &PolicySpec, states: &[f64], state_dim: usize) -> Result<Tensor> {
    if state_dim != policy.state_dim {
        return Err(PolicyError::StateWidth {
            want: policy.state_dim,
            got: state_dim,
        });
    }
    let n = states.len() / state_dim;
    let width = state_dim + policy.action_dim;
    let mut data = Vec::with_capacity(n * width);
    for s in states.chunks(state_dim) {
        data.extend_from_slice(s);
        data.extend_from_slice(&policy.act(s)?);
    }
    Ok(Tensor::new_unchecked(vec![n, width], data))
}

/// Pairwise order targets between policies with known returns.
/// `get(i, j)` is 1 when policy `i` outperforms `j` by more than
/// `eps_tie`, 0 in the opposite case, and 0.5 within the tie band (and on
/// the diagonal).
#[derive(Debug, Clone)]
pub struct RankLabelMatrix {
    m: usize,
    y: Vec<f64>,
}

impl RankLabelMatrix {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.y[i * self.m + j]
    }
}

/// Builds the label matrix from per-policy returns.
pub fn rank_labels(returns: &[f64], eps_tie: f64) -> Result<RankLabelMatrix> {
    if !(eps_tie.is_finite() && eps_tie >= 0.0) {
        return Err(PolicyError::Invalid(format!(
            "tie tolerance must be finite and non-negative, got {eps_tie}"
        )));
    }
    if let Some(bad) = returns.iter().find(|v| !v.is_finite()) {
        return Err(PolicyError::Invalid(format!(
            "non-finite return {bad}"
        )));
    }
    let m = returns.len();
    let mut y = vec![0.5; m * m];
    for i in 0..m {
        for j in 0..m {
            if returns[i] > returns[j] + eps_tie {
                y[i * m + j] = 1.0;
            } else if returns[i] < returns[j] - eps_tie {
                y[i * m + j] = 0.0;
            }
        }
    }
    Ok(RankLabelMatrix { m, y })
}
