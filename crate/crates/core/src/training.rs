//! Pairwise ranking loss and the scorer training loop.
//!
//! Training pre-samples a pool of state subsets, clusters each subset
//! once, then cycles through the pool: every policy is scored on the
//! current subset and the mean pairwise logistic loss over all score
//! differences is driven down with Adam. Inference reuses the same pool
//! and averages each policy's per-subset scores.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{kmeans_fit, ClusterError, ClusterModel};
use crate::data::{plan_subsets, DataError, StateDataset};
use crate::metrics::spearman;
use crate::model::{save_checkpoint, Mode, ModelError, ScoringModel};
use crate::numgrad::{
    adam_step, sigmoid, softplus, AdamHyper, AdamState, NumgradError, Tape, Tensor, Var,
};
use crate::policy::{build_representation, PolicyError, PolicySpec, RankLabelMatrix};
use crate::seeds::{self, tag};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numgrad(#[from] NumgradError),
    #[error("non-finite loss at iteration {iteration}; policy scores {scores:?}")]
    NonFiniteLoss { iteration: u64, scores: Vec<f64> },
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, TrainError>;

/// Knobs for [`train`]. Defaults suit the bundled synthetic benchmarks;
/// large logged datasets usually want `subset_size` in the thousands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// States per subset; must be at least the scorer's cluster count.
    pub subset_size: usize,
    /// Size of the fixed subset pool; one gradient step per subset per epoch.
    pub n_subsets: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Returns closer than this count as a tie when callers build labels.
    pub eps_tie: f64,
    pub kmeans_iters: usize,
    /// Stop after this many consecutive epochs without a new best
    /// validation Spearman. Requires a validation set.
    pub patience: Option<usize>,
    /// Write `epoch-N.ckpt` every N epochs into `checkpoint_dir`.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            subset_size: 256,
            n_subsets: 200,
            epochs: 10,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eps_tie: 0.0,
            kmeans_iters: 50,
            patience: None,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.subset_size < k {
            problems.push(format!(
                "subset_size {} is below the cluster count {k}",
                self.subset_size
            ));
        }
        if self.n_subsets == 0 {
            problems.push("n_subsets must be at least 1".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".into());
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            problems.push(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            problems.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !self.eps_tie.is_finite() || self.eps_tie < 0.0 {
            problems.push(format!(
                "eps_tie must be finite and non-negative, got {}",
                self.eps_tie
            ));
        }
        if self.kmeans_iters == 0 {
            problems.push("kmeans_iters must be at least 1".into());
        }
        if self.patience == Some(0) {
            problems.push("patience must be at least 1 when set".into());
        }
        if self.checkpoint_every == Some(0) {
            problems.push("checkpoint_every must be at least 1 when set".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

/// What [`train`] did: per-iteration losses, per-epoch validation
/// Spearman (None when unavailable), and which epoch won.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iteration_losses: Vec<f64>,
    pub epoch_val_spearman: Vec<Option<f64>>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<String>,
    pub epochs_run: usize,
}

/// One pre-sampled state subset with its fitted cluster structure.
#[derive(Debug, Clone)]
pub struct PreparedSubset {
    pub indices: Vec<usize>,
    /// Flat `subset_size x state_dim` copy of the sampled states.
    pub states: Vec<f64>,
    pub cluster: ClusterModel,
    pub assignments: Vec<usize>,
}

/// The fixed pool of clustered subsets shared by training and inference.
#[derive(Debug, Clone)]
pub struct SubsetPool {
    state_dim: usize,
    subsets: Vec<PreparedSubset>,
}

impl SubsetPool {
    /// Samples and clusters `n_subsets` subsets. Subset `t` draws its
    /// sampling and clustering randomness from streams derived from
    /// `(seed, t)`, so a pool prefix is stable when `n_subsets` grows.
    pub fn build(
        dataset: &StateDataset,
        subset_size: usize,
        n_subsets: usize,
        k: usize,
        kmeans_iters: usize,
        seed: u64,
    ) -> Result<Self> {
        let plan = plan_subsets(dataset.n(), subset_size, n_subsets, seed)?;
        let subsets = plan
            .subsets
            .par_iter()
            .enumerate()
            .map(|(t, indices)| {
                let states = dataset.gather(indices);
                let fit = kmeans_fit(
                    &states,
                    dataset.dim(),
                    k,
                    kmeans_iters,
                    seeds::derive_seed(seed, &[tag::CLUSTERING, t as u64]),
                )?;
                Ok(PreparedSubset {
                    indices: indices.clone(),
                    states,
                    cluster: fit.model,
                    assignments: fit.assignments,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            state_dim: dataset.dim(),
            subsets,
        })
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn subsets(&self) -> &[PreparedSubset] {
        &self.subsets
    }
}

/// Differentiable pairwise logistic ranking loss on a score difference.
pub fn pairwise_loss(
    tape: &mut Tape,
    score_i: Var,
    score_j: Var,
    y: f64,
) -> crate::numgrad::Result<Var> {
    let delta = tape.sub(score_i, score_j)?;
    tape.logistic_loss(delta, y)
}

/// The same loss on plain values.
pub fn pairwise_loss_value(score_i: f64, score_j: f64, y: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&y));
    let delta = score_i - score_j;
    y * softplus(-delta) + (1.0 - y) * softplus(delta)
}

/// Dropout behavior for one scoring pass over a subset.
#[derive(Debug, Clone, Copy)]
pub enum BatchMode {
    Eval,
    /// Dropout on; policy `i` draws its masks from a stream derived from
    /// `(seed, iteration, i)`.
    Train { seed: u64, iteration: u64 },
}

struct ScoredPolicy {
    tape: Tape,
    param_vars: Vec<Var>,
    score_var: Var,
    score: f64,
}

fn score_policies(
    model: &ScoringModel,
    policies: &[PolicySpec],
    subset: &PreparedSubset,
    mode: BatchMode,
) -> Result<Vec<ScoredPolicy>> {
    let state_dim = subset.cluster.dim();
    policies
        .par_iter()
        .enumerate()
        .map(|(i, policy)| {
            let repr = build_representation(policy, &subset.states, state_dim)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let score_var = match mode {
                BatchMode::Eval => {
                    model.score(&mut tape, &bound, &repr, &subset.assignments, &mut Mode::Eval)?
                }
                BatchMode::Train { seed, iteration } => {
                    let mut rng = seeds::stream(seed, &[tag::DROPOUT, iteration, i as u64]);
                    model.score(
                        &mut tape,
                        &bound,
                        &repr,
                        &subset.assignments,
                        &mut Mode::Train {
                            dropout_rng: &mut rng,
                        },
                    )?
                }
            };
            let score = tape.value(score_var).item();
            Ok(ScoredPolicy {
                tape,
                param_vars: bound.param_vars().to_vec(),
                score_var,
                score,
            })
        })
        .collect()
}

fn mean_pair_loss(scores: &[f64], labels: &RankLabelMatrix) -> f64 {
    let m = scores.len();
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            total += pairwise_loss_value(scores[i], scores[j], labels.get(i, j));
        }
    }
    total / (m * (m - 1) / 2) as f64
}

/// d(mean pair loss)/d(score_i). Each unordered pair contributes
/// `sigmoid(delta) - y` to its higher-index side with opposite sign,
/// which label antisymmetry folds into one sum over all j.
fn pair_seeds(scores: &[f64], labels: &RankLabelMatrix) -> Vec<f64> {
    let m = scores.len();
    let pairs = (m * (m - 1) / 2) as f64;
    (0..m)
        .map(|i| {
            let mut g = 0.0;
            for j in 0..m {
                if j != i {
                    g += sigmoid(scores[i] - scores[j]) - labels.get(i, j);
                }
            }
            g / pairs
        })
        .collect()
}

fn check_batch_inputs(policies: &[PolicySpec], labels: &RankLabelMatrix) -> Result<()> {
    if policies.len() < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 policies to form pairs, got {}",
            policies.len()
        )));
    }
    if labels.m() != policies.len() {
        let (m, n) = (labels.m(), policies.len());
        return Err(TrainError::Config(format!(
            "label matrix is {m}x{m} but there are {n} policies"
        )));
    }
    Ok(())
}

/// Mean pairwise loss over all unordered policy pairs on one subset.
pub fn batch_loss(
    model: &ScoringModel,
    policies: &[PolicySpec],
    labels: &RankLabelMatrix,
    subset: &PreparedSubset,
    mode: BatchMode,
) -> Result<f64> {
    check_batch_inputs(policies, labels)?;
    let scored = score_policies(model, policies, subset, mode)?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    require_finite(&scores, mode)?;
    Ok(mean_pair_loss(&scores, labels))
}

fn require_finite(scores: &[f64], mode: BatchMode) -> Result<()> {
    if scores.iter().all(|s| s.is_finite()) {
        return Ok(());
    }
    let iteration = match mode {
        BatchMode::Train { iteration, .. } => iteration,
        BatchMode::Eval => 0,
    };
    Err(TrainError::NonFiniteLoss {
        iteration,
        scores: scores.to_vec(),
    })
}

pub(crate) struct BatchStep {
    pub loss: f64,
    #[allow(dead_code)]
    pub scores: Vec<f64>,
    /// Aligned with `ScoringModel::param_refs()`.
    pub grads: Vec<Tensor>,
}

/// Forward and backward for one subset. Each policy's score lives on its
/// own tape; the pair losses never enter a tape. Instead every tape is
/// back-propagated from its score node seeded with the analytic
/// d(loss)/d(score), and the per-policy parameter gradients are summed.
pub(crate) fn batch_step(
    model: &ScoringModel,
    policies: &[PolicySpec],
    labels: &RankLabelMatrix,
    subset: &PreparedSubset,
    mode: BatchMode,
) -> Result<BatchStep> {
    check_batch_inputs(policies, labels)?;
    let scored = score_policies(model, policies, subset, mode)?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    require_finite(&scores, mode)?;
    let loss = mean_pair_loss(&scores, labels);
    let score_seeds = pair_seeds(&scores, labels);

    let per_policy: Vec<Vec<Option<Tensor>>> = scored
        .into_par_iter()
        .enumerate()
        .map(|(i, sp)| {
            let ScoredPolicy {
                mut tape,
                param_vars,
                score_var,
                ..
            } = sp;
            let mut grads = tape.backward_seeded(score_var, score_seeds[i])?;
            Ok(param_vars.iter().map(|&v| grads.take(v)).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads: Vec<Tensor> = model
        .param_refs()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for policy_grads in per_policy {
        for (acc, g) in grads.iter_mut().zip(policy_grads) {
            if let Some(g) = g {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
    Ok(BatchStep {
        loss,
        scores,
        grads,
    })
}

/// Per-policy mean scores over the leading `n_eval_subsets` of the pool,
/// with the full per-subset score table and the descending-score ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub mean_scores: Vec<f64>,
    /// `per_subset_scores[p][t]` is policy `p` on subset `t`.
    pub per_subset_scores: Vec<Vec<f64>>,
    /// Policy indices, best mean score first; ties keep the lower index.
    pub ranking: Vec<usize>,
}

/// Eval-mode scoring of every policy on the pool's leading subsets.
pub fn infer_scores(
    model: &ScoringModel,
    policies: &[PolicySpec],
    pool: &SubsetPool,
    n_eval_subsets: usize,
) -> Result<InferenceResult> {
    if policies.is_empty() {
        return Err(TrainError::Config("no policies to score".into()));
    }
    if n_eval_subsets == 0 || n_eval_subsets > pool.len() {
        return Err(TrainError::Config(format!(
            "n_eval_subsets {} outside 1..={}",
            n_eval_subsets,
            pool.len()
        )));
    }
    let m = policies.len();
    let n = n_eval_subsets;
    let flat = (0..m * n)
        .into_par_iter()
        .map(|idx| {
            let subset = &pool.subsets[idx % n];
            let repr =
                build_representation(&policies[idx / n], &subset.states, pool.state_dim)?;
            Ok(model.score_value(&repr, &subset.assignments)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let per_subset_scores: Vec<Vec<f64>> = flat.chunks(n).map(<[f64]>::to_vec).collect();
    let mean_scores: Vec<f64> = per_subset_scores
        .iter()
        .map(|row| row.iter().sum::<f64>() / n as f64)
        .collect();
    let mut ranking: Vec<usize> = (0..m).collect();
    ranking.sort_by(|&a, &b| mean_scores[b].total_cmp(&mean_scores[a]));
    Ok(InferenceResult {
        mean_scores,
        per_subset_scores,
        ranking,
    })
}

/// Runs the full training loop and leaves `model` holding the parameters
/// of the best validation epoch (or the final epoch without validation).
///
/// Returns the report and the subset pool so callers can rank further
/// policies on exactly the subsets the model was trained with.
pub fn train(
    model: &mut ScoringModel,
    policies: &[PolicySpec],
    labels: &RankLabelMatrix,
    validation: Option<(&[PolicySpec], &[f64])>,
    dataset: &StateDataset,
    config: &TrainConfig,
) -> Result<(TrainReport, SubsetPool)> {
    config.validate(model.config().k)?;
    check_batch_inputs(policies, labels)?;
    match validation {
        Some((vp, vr)) if vp.len() != vr.len() => {
            return Err(TrainError::Config(format!(
                "{} validation policies but {} validation returns",
                vp.len(),
                vr.len()
            )));
        }
        None if config.patience.is_some() => {
            return Err(TrainError::Config(
                "patience requires a validation set".into(),
            ));
        }
        _ => {}
    }
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }

    let pool = SubsetPool::build(
        dataset,
        config.subset_size,
        config.n_subsets,
        model.config().k,
        config.kmeans_iters,
        config.seed,
    )?;

    let hyper = AdamHyper {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.adam_eps,
    };
    let mut adam = AdamState::new(&model.param_refs());

    let mut iteration_losses = Vec::with_capacity(config.epochs * pool.len());
    let mut epoch_val_spearman = Vec::with_capacity(config.epochs);
    let mut best_epoch = None;
    let mut best_value = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0;
    let mut t: u64 = 0;

    for epoch in 0..config.epochs {
        for subset in pool.subsets() {
            t += 1;
            let step = batch_step(
                model,
                policies,
                labels,
                subset,
                BatchMode::Train {
                    seed: config.seed,
                    iteration: t,
                },
            )?;
            iteration_losses.push(step.loss);
            let mut params = model.param_refs_mut();
            adam_step(&mut params, &step.grads, &mut adam, &hyper, t)?;
        }
        epochs_run = epoch + 1;

        let val = match validation {
            Some((vp, vr)) if !vp.is_empty() => {
                let inferred = infer_scores(model, vp, &pool, pool.len())?;
                spearman(vr, &inferred.mean_scores).ok()
            }
            _ => None,
        };
        epoch_val_spearman.push(val);

        if validation.is_some() {
            if let Some(v) = val.filter(|&v| v > best_value) {
                best_value = v;
                best_epoch = Some(epoch);
                best_params = Some(model.param_tensors());
                stale = 0;
                if let Some(dir) = &config.checkpoint_dir {
                    save_checkpoint(&dir.join("best.ckpt"), model)?;
                }
            } else {
                stale += 1;
            }
        }

        if let (Some(dir), Some(every)) = (&config.checkpoint_dir, config.checkpoint_every) {
            if (epoch + 1) % every == 0 {
                save_checkpoint(&dir.join(format!("epoch-{epoch}.ckpt")), model)?;
            }
        }

        if let Some(patience) = config.patience {
            if stale >= patience {
                break;
            }
        }
    }

    if let Some(params) = best_params {
        model.set_params(params)?;
    }
    let best_checkpoint = best_epoch.map(|e| format!("epoch-{e}"));
    Ok((
        TrainReport {
            iteration_losses,
            epoch_val_spearman,
            best_epoch,
            best_checkpoint,
            epochs_run,
        },
        pool,
    ))
}
