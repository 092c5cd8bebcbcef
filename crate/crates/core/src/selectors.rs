//! Demonstration selection strategies over precomputed train embeddings.
//!
//! Every selector is a pure function of its inputs. Ties are always broken by
//! ascending train index so that runs replay exactly.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, EmbeddingError, EmbeddingVector};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("cannot select from an empty corpus")]
    EmptyCorpus,
    #[error("k = {k} is out of range for a corpus of {n}")]
    InvalidK { k: usize, n: usize },
    #[error("mmr lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("degenerate corpus: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// The k training examples chosen for one query at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub indices: Vec<usize>,
    /// Per-index score against the query key, when the selector has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl DemonstrationSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub k: usize,
    pub mmr_lambda: f64,
    pub kmeans: KMeansConfig,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            k: 4,
            mmr_lambda: 0.5,
            kmeans: KMeansConfig::default(),
        }
    }
}

fn check_k(k: usize, n: usize) -> Result<(), SelectError> {
    if n == 0 {
        return Err(SelectError::EmptyCorpus);
    }
    if k == 0 || k > n {
        return Err(SelectError::InvalidK { k, n });
    }
    Ok(())
}

/// Descending score, then ascending index.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` train vectors most cosine-similar to `query`, best first.
pub fn knn_top_k(
    query: &EmbeddingVector,
    train: &[EmbeddingVector],
    k: usize,
) -> Result<DemonstrationSet, SelectError> {
    check_k(k, train.len())?;
    let mut scored = train
        .iter()
        .enumerate()
        .map(|(i, v)| Ok((cosine(query, v)?, i)))
        .collect::<Result<Vec<_>, SelectError>>()?;
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    Ok(DemonstrationSet {
        indices: scored.iter().map(|&(_, i)| i).collect(),
        scores: Some(scored.iter().map(|&(s, _)| s).collect()),
    })
}

/// `k` distinct indices drawn uniformly from `0..train_size`.
pub fn random_k(train_size: usize, k: usize, seed: u64) -> Result<DemonstrationSet, SelectError> {
    check_k(k, train_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DemonstrationSet {
        indices: rand::seq::index::sample(&mut rng, train_size, k).into_vec(),
        scores: None,
    })
}

/// Outcome of [`kmeans_partition`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Member indices per cluster, ascending. Never empty.
    pub clusters: Vec<Vec<usize>>,
    /// Mean of each cluster's members.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid, one entry per evaluation.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn objective(points: &[&[f64]], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

fn means(points: &[&[f64]], assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for x in s.iter_mut() {
            *x /= n as f64;
        }
    }
    sums
}

/// Lloyd's algorithm with seeded farthest-point initialization.
///
/// The first center is a seeded uniform pick; each further center is the point
/// farthest from all chosen centers. Iteration stops when the assignment is
/// unchanged, the largest centroid move is below `cfg.tol`, or after
/// `cfg.max_iters` updates. A cluster that empties is re-seeded with the point
/// farthest from its own centroid.
pub fn kmeans_partition(
    train: &[EmbeddingVector],
    k: usize,
    cfg: &KMeansConfig,
) -> Result<KMeansResult, SelectError> {
    check_k(k, train.len())?;
    let points: Vec<&[f64]> = train.iter().map(|v| v.values()).collect();
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(EmbeddingError::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        }
        .into());
    }
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        let what = if distinct.len() == 1 {
            format!("all {} vectors are identical", points.len())
        } else {
            format!("only {} distinct vectors", distinct.len())
        };
        return Err(SelectError::Degenerate(format!("{what}; cannot form {k} clusters")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = rng.random_range(0..points.len());
    let mut centroids = vec![points[first].to_vec()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centroids.len() < k {
        let (far, _) = min_d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        centroids.push(points[far].to_vec());
        for (d, p) in min_d.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, points[far]));
        }
    }

    let mut trace = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut iterations = 0;
    let mut stale_objective;
    let assign = loop {
        let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        reseed_empty(&points, &mut assign, &mut centroids);
        trace.push(objective(&points, &assign, &centroids));
        stale_objective = false;
        if previous.as_ref() == Some(&assign) {
            break assign;
        }
        let updated = means(&points, &assign, k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        stale_objective = true;
        iterations += 1;
        if shift < cfg.tol || iterations >= cfg.max_iters {
            break assign;
        }
        previous = Some(assign);
    };
    if stale_objective {
        trace.push(objective(&points, &assign, &centroids));
    }

    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        clusters[c].push(i);
    }
    Ok(KMeansResult {
        clusters,
        centroids,
        assignments: assign,
        objective_trace: trace,
        iterations,
    })
}

fn reseed_empty(points: &[&[f64]], assign: &mut [usize], centroids: &mut [Vec<f64>]) {
    loop {
        let mut sizes = vec![0usize; centroids.len()];
        for &c in assign.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[assign[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assign[i]]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("k <= n leaves a cluster with two or more members");
        assign[i] = empty;
        centroids[empty] = points[i].to_vec();
    }
}

/// For each cluster, the member closest to its centroid (ties: lower index),
/// in cluster order.
pub fn cluster_representatives(clusters: &KMeansResult, train: &[EmbeddingVector]) -> DemonstrationSet {
    let indices = clusters
        .clusters
        .iter()
        .zip(&clusters.centroids)
        .map(|(members, centroid)| {
            let mut best = (usize::MAX, f64::INFINITY);
            for &i in members {
                let d = sq_dist(train[i].values(), centroid);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();
    DemonstrationSet {
        indices,
        scores: None,
    }
}

/// Greedy maximal marginal relevance.
///
/// The first pick is the most query-similar item; each later pick maximizes
/// `lambda * cos(i, query) - (1 - lambda) * max_j cos(i, selected_j)`.
/// Scores are the marginal values at pick time (the first is `lambda * cos`).
pub fn mmr_k(
    query: &EmbeddingVector,
    train: &[EmbeddingVector],
    k: usize,
    lambda: f64,
) -> Result<DemonstrationSet, SelectError> {
    check_k(k, train.len())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SelectError::InvalidLambda(lambda));
    }
    let relevance = train
        .iter()
        .map(|v| cosine(query, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut chosen = vec![false; train.len()];
    let mut redundancy = vec![f64::NEG_INFINITY; train.len()];
    let mut indices = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    while indices.len() < k {
        let (pick, score) = if indices.is_empty() {
            let first = argmax(relevance.iter().copied().enumerate()).expect("corpus is non-empty");
            (first, lambda * relevance[first])
        } else {
            let marginal = |i: usize| lambda * relevance[i] - (1.0 - lambda) * redundancy[i];
            let best = argmax((0..train.len()).filter(|&i| !chosen[i]).map(|i| (i, marginal(i))))
                .expect("k <= n leaves candidates");
            (best, marginal(best))
        };
        chosen[pick] = true;
        indices.push(pick);
        scores.push(score);
        if indices.len() < k {
            for (j, r) in redundancy.iter_mut().enumerate() {
                if !chosen[j] {
                    *r = r.max(cosine(&train[j], &train[pick])?);
                }
            }
        }
    }
    Ok(DemonstrationSet {
        indices,
        scores: Some(scores),
    })
}

/// Index of the maximal value; the earliest index wins ties.
fn argmax(items: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in items {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}
