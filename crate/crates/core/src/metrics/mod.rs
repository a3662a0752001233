//! Ranking-quality metrics: rank correlation, top-k regret, and the
//! distance between a candidate policy set and the reference set.

mod report;

pub use report::{ranked_result_table, render_rank_report_svg};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::StateDataset;
use crate::policy::{PolicyError, PolicySpec};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least {want} values, got {got}")]
    TooFew { want: usize, got: usize },
    #[error("length mismatch: {left} values vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{what} are all equal; rank correlation is undefined")]
    Degenerate { what: &'static str },
    #[error("non-finite value among {what}")]
    NonFinite { what: &'static str },
    #[error("k = {k} outside 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("policy sets disagree on dimensions: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

type Result<T> = std::result::Result<T, MetricError>;

/// Average-of-ties ranks, 1-based.
fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn check_pair(a: &[f64], b: &[f64], what_a: &'static str, what_b: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    for (values, what) in [(a, what_a), (b, what_b)] {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite { what });
        }
    }
    Ok(())
}

/// Spearman rank correlation: the Pearson correlation of the two
/// fractional-rank sequences. Ties share the average of their ranks.
pub fn spearman(true_values: &[f64], predicted_values: &[f64]) -> Result<f64> {
    check_pair(
        true_values,
        predicted_values,
        "true values",
        "predicted values",
    )?;
    if true_values.len() < 2 {
        return Err(MetricError::TooFew {
            want: 2,
            got: true_values.len(),
        });
    }
    for (values, what) in [
        (true_values, "true values"),
        (predicted_values, "predicted values"),
    ] {
        if values.iter().all(|&v| v == values[0]) {
            return Err(MetricError::Degenerate { what });
        }
    }
    let rx = fractional_ranks(true_values);
    let ry = fractional_ranks(predicted_values);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        let dx = x - mx;
        let dy = y - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Indices sorted by descending score; equal scores keep their original
/// (lower-index-first) order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// Normalized gap between the best true return overall and the best true
/// return among the k policies ranked highest by predicted score.
///
/// Returns 0 when every true return is equal (nothing to regret).
pub fn regret_at_k(true_returns: &[f64], predicted_scores: &[f64], k: usize) -> Result<f64> {
    check_pair(
        true_returns,
        predicted_scores,
        "true returns",
        "predicted scores",
    )?;
    let n = true_returns.len();
    if n == 0 {
        return Err(MetricError::TooFew { want: 1, got: 0 });
    }
    if k == 0 || k > n {
        return Err(MetricError::BadK { k, n });
    }
    let vmax = true_returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let vmin = true_returns.iter().cloned().fold(f64::INFINITY, f64::min);
    if vmax == vmin {
        return Ok(0.0);
    }
    let order = descending_order(predicted_scores);
    let best_topk = order[..k]
        .iter()
        .map(|&i| true_returns[i])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((vmax - best_topk) / (vmax - vmin))
}

/// Mean over candidate policies of the minimum, over reference policies,
/// of the mean squared action difference across the state pool.
///
/// `max_states` caps the pool at its leading prefix for very large
/// datasets; `None` uses every state.
pub fn policy_set_distance(
    reference: &[PolicySpec],
    candidates: &[PolicySpec],
    states: &StateDataset,
    max_states: Option<usize>,
) -> Result<f64> {
    if reference.is_empty() || candidates.is_empty() {
        return Err(MetricError::TooFew { want: 1, got: 0 });
    }
    let sd = reference[0].state_dim;
    let ad = reference[0].action_dim;
    for p in reference.iter().chain(candidates) {
        if p.state_dim != sd || p.action_dim != ad {
            return Err(MetricError::DimMismatch(format!(
                "expected {sd}x{ad}, found {}x{}",
                p.state_dim, p.action_dim
            )));
        }
    }
    if states.dim() != sd {
        return Err(MetricError::DimMismatch(format!(
            "state pool width {} vs policy state_dim {sd}",
            states.dim()
        )));
    }
    let n = max_states.map_or(states.n(), |m| m.min(states.n()));
    if n == 0 {
        return Err(MetricError::TooFew { want: 1, got: 0 });
    }
    let pool = &states.as_flat()[..n * sd];

    let reference_actions = reference
        .par_iter()
        .map(|p| p.act_all(pool))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let per_candidate = candidates
        .par_iter()
        .map(|p| {
            let acts = p.act_all(pool)?;
            let nearest = reference_actions
                .iter()
                .map(|ra| mean_squared_gap(&acts, ra, n))
                .fold(f64::INFINITY, f64::min);
            Ok(nearest)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_candidate.iter().sum::<f64>() / candidates.len() as f64)
}

fn mean_squared_gap(a: &[f64], b: &[f64], n_states: usize) -> f64 {
    let total: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    total / n_states as f64
}

/// One regret value at a requested cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretEntry {
    pub k: usize,
    pub value: f64,
}

/// A scored, ordered policy set, with accuracy metrics when the true
/// returns are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub policy_ids: Vec<String>,
    pub mean_scores: Vec<f64>,
    pub true_returns: Option<Vec<f64>>,
    /// Indices into `policy_ids`, best predicted score first. Ties go to
    /// the lexicographically smaller id.
    pub ranking: Vec<usize>,
    pub spearman: Option<f64>,
    pub regret_at_k: Vec<RegretEntry>,
}

impl RankedResult {
    /// Ranks `mean_scores` descending and, when `true_returns` is given,
    /// fills in Spearman correlation and regret at each requested cutoff.
    pub fn new(
        policy_ids: Vec<String>,
        mean_scores: Vec<f64>,
        true_returns: Option<Vec<f64>>,
        regret_ks: &[usize],
    ) -> Result<Self> {
        if policy_ids.len() != mean_scores.len() {
            return Err(MetricError::LengthMismatch {
                left: policy_ids.len(),
                right: mean_scores.len(),
            });
        }
        if policy_ids.is_empty() {
            return Err(MetricError::TooFew { want: 1, got: 0 });
        }
        if mean_scores.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite {
                what: "mean scores",
            });
        }
        if let Some(v) = &true_returns {
            if v.len() != policy_ids.len() {
                return Err(MetricError::LengthMismatch {
                    left: policy_ids.len(),
                    right: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(MetricError::NonFinite {
                    what: "true returns",
                });
            }
        }

        let mut ranking: Vec<usize> = (0..policy_ids.len()).collect();
        ranking.sort_by(|&i, &j| {
            mean_scores[j]
                .total_cmp(&mean_scores[i])
                .then_with(|| policy_ids[i].cmp(&policy_ids[j]))
        });

        let (spearman_value, regrets) = match &true_returns {
            Some(truth) if truth.len() >= 2 => {
                let s = spearman(truth, &mean_scores)?;
                let r = regret_ks
                    .iter()
                    .map(|&k| {
                        Ok(RegretEntry {
                            k,
                            value: regret_at_k(truth, &mean_scores, k)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Some(s), r)
            }
            _ => (None, Vec::new()),
        };

        Ok(Self {
            policy_ids,
            mean_scores,
            true_returns,
            ranking,
            spearman: spearman_value,
            regret_at_k: regrets,
        })
    }
}
