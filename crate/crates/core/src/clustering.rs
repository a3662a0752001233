//! K-means clustering of dataset states.
//!
//! Lloyd iterations with kmeans++ seeding, restarted from several
//! initializations with the lowest-inertia run kept. The fit is fully
//! deterministic given its seed, ties go to the lowest index, and empty
//! clusters are repaired by donating the farthest point of a cluster that
//! can spare one, so the recorded inertia never increases between
//! iterations.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dim must be at least 1")]
    ZeroDim,
    #[error("max_iters must be at least 1")]
    ZeroIters,
    #[error("need at least as many points as clusters: n = {n}, k = {k}")]
    TooFewPoints { n: usize, k: usize },
    #[error("points length {len} is not a multiple of dim {dim}")]
    RaggedPoints { len: usize, dim: usize },
    #[error("non-finite coordinate at flat index {index}")]
    NonFinite { index: usize },
    #[error("point has {got} coordinates, model expects {want}")]
    DimMismatch { want: usize, got: usize },
}

type Result<T> = std::result::Result<T, ClusterError>;

/// Fitted centroids. Assignment is by squared Euclidean distance with ties
/// broken toward the lowest centroid index.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    /// Row-major `k x dim`.
    centroids: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Index of the nearest centroid.
    pub fn assign(&self, point: &[f64]) -> Result<usize> {
        if point.len() != self.dim {
            return Err(ClusterError::DimMismatch {
                want: self.dim,
                got: point.len(),
            });
        }
        Ok(nearest(&self.centroids, self.k, point).0)
    }

    /// Nearest centroid for each row of a flat `n x dim` matrix.
    pub fn assign_all(&self, points: &[f64]) -> Result<Vec<usize>> {
        if points.len() % self.dim != 0 {
            return Err(ClusterError::RaggedPoints {
                len: points.len(),
                dim: self.dim,
            });
        }
        Ok(points
            .chunks(self.dim)
            .map(|p| nearest(&self.centroids, self.k, p).0)
            .collect())
    }
}

/// Result of [`kmeans_fit`]: the model, the final assignments (consistent
/// with the returned centroids), and the inertia recorded after each Lloyd
/// iteration.
#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    pub inertia_history: Vec<f64>,
}

/// Squared distance to the nearest centroid, with its index. Strict
/// comparison keeps the lowest index on ties.
fn nearest(centroids: &[f64], k: usize, point: &[f64]) -> (usize, f64) {
    let dim = point.len();
    let mut best = (0usize, f64::INFINITY);
    for c in 0..k {
        let d2 = sq_dist(&centroids[c * dim..(c + 1) * dim], point);
        if d2 < best.1 {
            best = (c, d2);
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Number of independently seeded fits per call; the lowest-inertia run
/// wins, which is what lets small instances reliably reach the global
/// optimum instead of a local one.
const RESTARTS: usize = 30;

/// Clusters `points` (flat row-major `n x dim`) into `k` groups.
///
/// Each restart seeds with kmeans++ and then alternates Lloyd assignment
/// and mean updates until assignments stop changing or `max_iters` passes;
/// the restart with the lowest final inertia is returned, along with that
/// run's inertia history.
///
/// The returned assignments always obey the nearest-centroid rule. Empty
/// clusters are repaired between iterations, but when the data has fewer
/// distinct locations than `k` no consistent all-populated solution
/// exists, so some clusters can end empty; consumers treat an empty
/// cluster explicitly rather than assuming membership.
pub fn kmeans_fit(
    points: &[f64],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KmeansFit> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if dim == 0 {
        return Err(ClusterError::ZeroDim);
    }
    if max_iters == 0 {
        return Err(ClusterError::ZeroIters);
    }
    if points.len() % dim != 0 {
        return Err(ClusterError::RaggedPoints {
            len: points.len(),
            dim,
        });
    }
    let n = points.len() / dim;
    if n < k {
        return Err(ClusterError::TooFewPoints { n, k });
    }
    if let Some(index) = points.iter().position(|v| !v.is_finite()) {
        return Err(ClusterError::NonFinite { index });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KmeansFit> = None;
    for _ in 0..RESTARTS {
        let run = lloyd_run(points, n, dim, k, max_iters, &mut rng);
        if best
            .as_ref()
            .map_or(true, |b| final_inertia(&run) < final_inertia(b))
        {
            best = Some(run);
        }
    }
    Ok(best.expect("RESTARTS is positive"))
}

fn final_inertia(fit: &KmeansFit) -> f64 {
    *fit
        .inertia_history
        .last()
        .expect("max_iters >= 1 records at least one inertia")
}

fn lloyd_run(
    points: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> KmeansFit {
    let mut centroids = seed_plus_plus(points, n, dim, k, rng);
    let mut assignments = assign_points(points, dim, &centroids, k);
    let mut history = Vec::new();

    for _ in 0..max_iters {
        repair_empty_clusters(points, dim, k, &centroids, &mut assignments);
        update_centroids(points, dim, k, &assignments, &mut centroids);
        let next: Vec<usize> = assign_points(points, dim, &centroids, k);
        let inertia: f64 = points
            .chunks(dim)
            .zip(&next)
            .map(|(p, &c)| sq_dist(&centroids[c * dim..(c + 1) * dim], p))
            .sum();
        history.push(inertia);
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
    }

    KmeansFit {
        model: ClusterModel { k, dim, centroids },
        assignments,
        inertia_history: history,
    }
}

/// kmeans++ seeding with greedy candidate selection. The first centroid is
/// a uniform draw; for each further one, a handful of candidates are drawn
/// with probability proportional to squared distance from the chosen set
/// and the candidate that lowers the summed distance most is kept. When
/// every point already coincides with a centroid the draw falls back to
/// uniform.
fn seed_plus_plus(points: &[f64], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);

    let n_candidates = 2 + (k as f64).ln() as usize;
    let mut d2: Vec<f64> = points
        .chunks(dim)
        .map(|p| sq_dist(&centroids[..dim], p))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            let pick = rng.random_range(0..n);
            centroids.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
            continue;
        }
        let mut chosen: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..n_candidates {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > r {
                    pick = i;
                    break;
                }
            }
            let candidate = &points[pick * dim..(pick + 1) * dim];
            let mut updated = d2.clone();
            let mut potential = 0.0;
            for (i, p) in points.chunks(dim).enumerate() {
                let d = sq_dist(candidate, p);
                if d < updated[i] {
                    updated[i] = d;
                }
                potential += updated[i];
            }
            if chosen.as_ref().map_or(true, |&(_, best, _)| potential < best) {
                chosen = Some((pick, potential, updated));
            }
        }
        let (pick, _, updated) = chosen.expect("n_candidates is positive");
        d2 = updated;
        centroids.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
    }
    centroids
}

fn assign_points(points: &[f64], dim: usize, centroids: &[f64], k: usize) -> Vec<usize> {
    points
        .chunks(dim)
        .map(|p| nearest(centroids, k, p).0)
        .collect()
}

/// Gives every empty cluster one point: the point farthest from its own
/// centroid among clusters that still have at least two members, skipping
/// points already moved in this round. With `n >= k` a donor always
/// exists, and making the moved point a singleton can only lower inertia.
fn repair_empty_clusters(
    points: &[f64],
    dim: usize,
    k: usize,
    centroids: &[f64],
    assignments: &mut [usize],
) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut moved = vec![false; assignments.len()];
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut donor: Option<(usize, f64)> = None;
        for (i, p) in points.chunks(dim).enumerate() {
            if moved[i] || counts[assignments[i]] < 2 {
                continue;
            }
            let c = assignments[i];
            let d2 = sq_dist(&centroids[c * dim..(c + 1) * dim], p);
            if donor.map_or(true, |(_, best)| d2 > best) {
                donor = Some((i, d2));
            }
        }
        let (i, _) = donor.expect("n >= k guarantees a donor cluster with two members");
        counts[assignments[i]] -= 1;
        assignments[i] = empty;
        counts[empty] = 1;
        moved[i] = true;
    }
}

fn update_centroids(
    points: &[f64],
    dim: usize,
    k: usize,
    assignments: &[usize],
    centroids: &mut [f64],
) {
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k * dim];
    for (p, &a) in points.chunks(dim).zip(assignments) {
        counts[a] += 1;
        for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        for j in 0..dim {
            centroids[c * dim + j] = sums[c * dim + j] * inv;
        }
    }
}
