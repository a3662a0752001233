//! Synthetic benchmark: toy control environments with computable ground
//! truth, seeded policy families, Monte-Carlo evaluation, and offline
//! data collection.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Trajectory};
use crate::metrics::{MetricError, RankedResult};
use crate::policy::{PolicyError, PolicySpec};
use crate::seeds::{self, tag};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid environment spec: {0}")]
    Env(String),
    #[error("{what}: expected {want} values, got {got}")]
    Width {
        what: &'static str,
        want: usize,
        got: usize,
    },
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("policy family needs at least 2 members, got {0}")]
    FamilyTooSmall(usize),
    #[error("quality range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")]
    QualityRange { lo: f64, hi: f64 },
    #[error("n_rollouts must be at least 1")]
    ZeroRollouts,
    #[error("no behavior policies to roll out")]
    NoBehavior,
    #[error("split sizes sum to {want} but only {got} items exist")]
    SplitTooLarge { want: usize, got: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Pointreach2d,
    Lineworld1d,
}

/// A small episodic MDP with fully known dynamics.
///
/// `pointreach2d`: the state is a 2D position, actions nudge it by
/// `step_scale * clamp(action)` plus Gaussian noise, and the reward is
/// the negative distance of the next position from the origin.
///
/// `lineworld1d`: an integer line. The clamped action rounds to a move
/// in {-1, 0, 1} (ties away from zero) and the reward is the negative
/// distance of the next cell from the origin. Always noise-free, so
/// returns are exactly enumerable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: EnvName,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_step_scale")]
    pub step_scale: f64,
    #[serde(default = "default_action_clamp")]
    pub action_clamp: f64,
    /// Episode start state; `None` uses the environment's default.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
}

fn default_horizon() -> usize {
    20
}

fn default_gamma() -> f64 {
    0.99
}

fn default_step_scale() -> f64 {
    0.1
}

fn default_action_clamp() -> f64 {
    1.0
}

impl EnvSpec {
    pub fn pointreach2d() -> Self {
        Self {
            name: EnvName::Pointreach2d,
            horizon: 20,
            gamma: 0.99,
            noise_std: 0.0,
            step_scale: 0.1,
            action_clamp: 1.0,
            start: None,
        }
    }

    pub fn lineworld1d() -> Self {
        Self {
            name: EnvName::Lineworld1d,
            horizon: 8,
            gamma: 1.0,
            noise_std: 0.0,
            step_scale: 0.1,
            action_clamp: 1.0,
            start: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.name {
            EnvName::Pointreach2d => 2,
            EnvName::Lineworld1d => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.state_dim()
    }

    pub fn start_state(&self) -> Vec<f64> {
        self.start.clone().unwrap_or_else(|| match self.name {
            EnvName::Pointreach2d => vec![1.0, 1.0],
            EnvName::Lineworld1d => vec![3.0],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.horizon == 0 {
            problems.push("horizon must be at least 1".to_string());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            problems.push(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            problems.push(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            ));
        }
        if !self.step_scale.is_finite() || self.step_scale <= 0.0 {
            problems.push(format!(
                "step_scale must be finite and positive, got {}",
                self.step_scale
            ));
        }
        if !self.action_clamp.is_finite() || self.action_clamp <= 0.0 {
            problems.push(format!(
                "action_clamp must be finite and positive, got {}",
                self.action_clamp
            ));
        }
        if let Some(start) = &self.start {
            if start.len() != self.state_dim() {
                problems.push(format!(
                    "start has {} values, environment is {}-dimensional",
                    start.len(),
                    self.state_dim()
                ));
            }
            if start.iter().any(|v| !v.is_finite()) {
                problems.push("start contains a non-finite value".to_string());
            }
        }
        if self.name == EnvName::Lineworld1d {
            if self.noise_std != 0.0 {
                problems.push("lineworld1d is exactly enumerable and allows no noise".to_string());
            }
            if let Some(start) = &self.start {
                if start.iter().any(|v| v.fract() != 0.0) {
                    problems.push("lineworld1d start must sit on integer cells".to_string());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(BenchError::Env(problems.join("; ")))
        }
    }
}

/// One transition. Returns the next state and the reward for taking
/// `action` in `state`.
pub fn step<R: Rng>(
    env: &EnvSpec,
    state: &[f64],
    action: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if state.len() != env.state_dim() {
        return Err(BenchError::Width {
            what: "state",
            want: env.state_dim(),
            got: state.len(),
        });
    }
    if action.len() != env.action_dim() {
        return Err(BenchError::Width {
            what: "action",
            want: env.action_dim(),
            got: action.len(),
        });
    }
    if state.iter().chain(action).any(|v| !v.is_finite()) {
        return Err(BenchError::NonFinite {
            what: "state or action",
        });
    }
    let c = env.action_clamp;
    match env.name {
        EnvName::Pointreach2d => {
            let noise = Normal::new(0.0, env.noise_std)
                .map_err(|e| BenchError::Env(format!("noise_std: {e}")))?;
            let next: Vec<f64> = state
                .iter()
                .zip(action)
                .map(|(s, a)| {
                    let mut v = s + env.step_scale * a.clamp(-c, c);
                    if env.noise_std > 0.0 {
                        v += noise.sample(rng);
                    }
                    v
                })
                .collect();
            let reward = -next.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((next, reward))
        }
        EnvName::Lineworld1d => {
            let mv = action[0].clamp(-c, c).round();
            let next = vec![state[0] + mv];
            let reward = -next[0].abs();
            Ok((next, reward))
        }
    }
}

/// Rolls one episode of `horizon + 1` steps from the environment's start
/// state. Step `t` records the state visited, the action taken, and the
/// reward of the resulting transition.
pub fn rollout<R: Rng>(env: &EnvSpec, policy: &PolicySpec, rng: &mut R) -> Result<Trajectory> {
    env.validate()?;
    if policy.state_dim != env.state_dim() || policy.action_dim != env.action_dim() {
        return Err(BenchError::Width {
            what: "policy dimensions",
            want: env.state_dim(),
            got: policy.state_dim,
        });
    }
    let steps = env.horizon + 1;
    let mut states = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps);
    let mut rewards = Vec::with_capacity(steps);
    let mut state = env.start_state();
    for _ in 0..steps {
        let action = policy.act(&state)?;
        let (next, reward) = step(env, &state, &action, rng)?;
        states.push(state);
        actions.push(action);
        rewards.push(reward);
        state = next;
    }
    Ok(Trajectory {
        states,
        actions,
        rewards,
    })
}

/// Monte-Carlo estimate of the expected discounted return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McReturn {
    pub mean: f64,
    pub std_error: f64,
}

/// Averages the discounted return of `n_rollouts` episodes. Rollout `i`
/// draws from its own stream derived from `(seed, i)`, so estimates are
/// reproducible and independent of evaluation order.
pub fn monte_carlo_return(
    env: &EnvSpec,
    policy: &PolicySpec,
    n_rollouts: usize,
    gamma: f64,
    seed: u64,
) -> Result<McReturn> {
    if n_rollouts == 0 {
        return Err(BenchError::ZeroRollouts);
    }
    let returns = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds::stream(seed, &[tag::ROLLOUTS, i as u64]);
            let traj = rollout(env, policy, &mut rng)?;
            Ok(traj.discounted_return(gamma)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std_error = if returns.len() < 2 {
        0.0
    } else {
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok(McReturn { mean, std_error })
}

/// One generated policy with its quality coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember {
    pub policy: PolicySpec,
    /// Interpolation weight toward the proportional controller; 0 is a
    /// pure random gain, 1 the controller itself.
    pub alpha: f64,
}

/// An ordered set of linear policies of graded quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFamily {
    pub members: Vec<FamilyMember>,
    pub seed: u64,
}

/// Generates `count` linear policies whose gains interpolate between one
/// seeded random gain (shared by the family) and the near-optimal
/// proportional controller `a = -(action_clamp / step_scale) * s`, so the
/// expected return rises with the coefficient. Per-member Gaussian weight
/// jitter scaled by `alpha * (1 - alpha)` keeps interior members off the
/// straight line while both interval ends stay exact. The base gain draws
/// from a stream derived from `seed`, member `i`'s jitter from `(seed, i)`.
pub fn gen_policy_family(
    env: &EnvSpec,
    count: usize,
    quality_range: [f64; 2],
    seed: u64,
) -> Result<PolicyFamily> {
    env.validate()?;
    if count < 2 {
        return Err(BenchError::FamilyTooSmall(count));
    }
    let [lo, hi] = quality_range;
    if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(BenchError::QualityRange { lo, hi });
    }
    let d = env.state_dim();
    let opt_gain = env.action_clamp / env.step_scale;
    let jitter_base = 0.05 * opt_gain;
    let clip = Some(vec![[-env.action_clamp, env.action_clamp]; env.action_dim()]);

    let mut base_rng = seeds::stream(seed, &[tag::POLICY_FAMILY]);
    let w_rand: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            (0..d)
                .map(|_| (base_rng.random::<f64>() * 2.0 - 1.0) * opt_gain)
                .collect()
        })
        .collect();
    let b_rand: Vec<f64> = (0..d).map(|_| base_rng.random::<f64>() * 2.0 - 1.0).collect();

    let members = (0..count)
        .map(|i| {
            let alpha = lo + (hi - lo) * i as f64 / (count - 1) as f64;
            let mut rng = seeds::stream(seed, &[tag::POLICY_FAMILY, i as u64]);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let jitter = jitter_base * alpha * (1.0 - alpha);
            let weights: Vec<Vec<f64>> = (0..d)
                .map(|r| {
                    (0..d)
                        .map(|c| {
                            let optimal = if r == c { -opt_gain } else { 0.0 };
                            let mut w = (1.0 - alpha) * w_rand[r][c] + alpha * optimal;
                            if jitter > 0.0 {
                                w += jitter * normal.sample(&mut rng);
                            }
                            w
                        })
                        .collect()
                })
                .collect();
            let biases: Vec<f64> = (0..d)
                .map(|r| {
                    let mut b = (1.0 - alpha) * b_rand[r];
                    if jitter > 0.0 {
                        b += 0.1 * jitter * normal.sample(&mut rng);
                    }
                    b
                })
                .collect();
            let policy = PolicySpec::linear(weights, biases, clip.clone())?;
            Ok(FamilyMember { policy, alpha })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyFamily { members, seed })
}

/// Rolls out the behavior policies round-robin, one derived stream per
/// trajectory.
pub fn collect_offline_data(
    env: &EnvSpec,
    behavior: &[PolicySpec],
    n_trajectories: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_trajectories == 0 {
        return Ok(Vec::new());
    }
    if behavior.is_empty() {
        return Err(BenchError::NoBehavior);
    }
    (0..n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds::stream(seed, &[tag::OFFLINE_DATA, i as u64]);
            rollout(env, &behavior[i % behavior.len()], &mut rng)
        })
        .collect()
}

/// Splits `0..n` into disjoint groups of the requested sizes after a
/// seeded shuffle. Leftover indices are dropped.
pub fn split_indices(n: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    let want: usize = sizes.iter().sum();
    if want > n {
        return Err(BenchError::SplitTooLarge { want, got: n });
    }
    let mut rng = seeds::stream(seed, &[tag::SPLIT]);
    let perm = rand::seq::index::sample(&mut rng, n, n).into_vec();
    let mut groups = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &size in sizes {
        groups.push(perm[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(groups)
}

/// One policy in a benchmark manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub alpha: f64,
    pub true_return: f64,
    pub std_error: f64,
}

/// Everything a generated benchmark run writes down: the environment,
/// the seeds, where the policy files live, and the Monte-Carlo returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchManifest {
    pub env: EnvSpec,
    pub seed: u64,
    pub n_rollouts: usize,
    pub data_path: String,
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl BenchManifest {
    /// All entries in train, validation, test order.
    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
    }
}

/// Scores a ranked result against the returns recorded in a manifest
/// section, matching policies by id.
pub fn rescore_against_manifest(
    ranked: &RankedResult,
    entries: &[ManifestEntry],
    regret_ks: &[usize],
) -> std::result::Result<RankedResult, MetricError> {
    let truth: Vec<f64> = ranked
        .policy_ids
        .iter()
        .map(|id| {
            entries
                .iter()
                .find(|e| &e.id == id)
                .map(|e| e.true_return)
                .ok_or(MetricError::Degenerate {
                    what: "manifest ids",
                })
        })
        .collect::<std::result::Result<_, _>>()?;
    RankedResult::new(
        ranked.policy_ids.clone(),
        ranked.mean_scores.clone(),
        Some(truth),
        regret_ks,
    )
}
