//! Behavioral archetype discovery: k-means with k-means++ seeding and
//! silhouette-driven choice of k.
//!
//! Distances are Euclidean. On unit vectors this is monotone in cosine
//! distance (`|u - v|² = 2 - 2 cos`), so centroid means stay well defined
//! while the geometry follows cosine similarity.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingError};
use crate::index::{IndexError, VectorIndex};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_N_INIT: usize = 10;
pub const DEFAULT_K_MIN: usize = 3;
pub const DEFAULT_K_MAX: usize = 8;

#[derive(Debug, Clone, thiserror::Error)]
pub enum ClusterError {
    #[error("k must be at least 2 (got {0})")]
    InvalidK(usize),
    #[error("need at least {k} distinct vectors, found {distinct}")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("silhouette needs at least two non-empty clusters")]
    SingleCluster,
    #[error("assignments cover {labels} points but {points} were given")]
    LengthMismatch { labels: usize, points: usize },
    #[error("invalid k range {k_min}..={k_max}")]
    InvalidRange { k_min: usize, k_max: usize },
    #[error("points have inconsistent dimensions")]
    RaggedInput,
    #[error("cluster {0} does not exist")]
    UnknownCluster(usize),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub n_init: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            n_init: DEFAULT_N_INIT,
        }
    }
}

/// Result of one k-means solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points<P: AsRef<[f64]>>(points: &[P]) -> Result<usize, ClusterError> {
    let dim = points.first().map_or(0, |p| p.as_ref().len());
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(ClusterError::RaggedInput);
    }
    Ok(dim)
}

pub fn distinct_count<P: AsRef<[f64]>>(points: &[P]) -> usize {
    points
        .iter()
        .map(|p| p.as_ref().iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn kmeans_plus_plus<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].as_ref().to_vec()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p.as_ref(), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = n - 1;
        for (i, &w) in nearest.iter().enumerate() {
            if w > 0.0 {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
        }
        // Guard against rounding landing on an already-chosen point.
        if nearest[chosen] == 0.0 {
            chosen = (0..n).rev().find(|&i| nearest[i] > 0.0).expect("distinct points remain");
        }
        let c = points[chosen].as_ref().to_vec();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Nearest-centroid labels (lowest index on ties) and per-point squared distance.
fn assign<P: AsRef<[f64]> + Sync>(points: &[P], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p.as_ref(), centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

/// Moves the farthest point of a multi-member cluster into each empty
/// cluster. Never increases inertia.
fn repair_empty<P: AsRef<[f64]>>(
    points: &[P],
    centroids: &mut [Vec<f64>],
    labels: &mut [usize],
    dists: &mut [f64],
) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("n >= k guarantees a multi-member cluster");
        centroids[empty] = points[far].as_ref().to_vec();
        labels[far] = empty;
        dists[far] = 0.0;
    }
}

/// One k-means solve: k-means++ seeding followed by Lloyd iterations until
/// the largest centroid shift drops below `tol` or `max_iter` is reached.
pub fn kmeans_single<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansFit, ClusterError> {
    if k < 2 {
        return Err(ClusterError::InvalidK(k));
    }
    let dim = check_points(points)?;
    let distinct = distinct_count(points);
    if distinct < k {
        return Err(ClusterError::TooFewDistinct { k, distinct });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    let (mut labels, mut dists) = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut labels, &mut dists);
    history.push(dists.iter().sum::<f64>());

    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p.as_ref()).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }

        (labels, dists) = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut labels, &mut dists);
        history.push(dists.iter().sum::<f64>());

        if shift < tol {
            converged = true;
            break;
        }
    }

    Ok(KMeansFit {
        k,
        seed,
        centroids,
        labels,
        inertia: *history.last().expect("at least one assignment"),
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Best-inertia solve over `options.n_init` restarts whose seeds derive from `seed`.
pub fn kmeans<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
    seed: u64,
    options: KMeansOptions,
) -> Result<KMeansFit, ClusterError> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..options.n_init.max(1) {
        let fit = kmeans_single(points, k, seeds.random(), options.max_iter, options.tol)?;
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    let mut best = best.expect("n_init >= 1");
    best.seed = seed;
    Ok(best)
}

/// Per-point silhouette values; singletons score 0.
pub fn silhouette_samples<P: AsRef<[f64]> + Sync>(
    points: &[P],
    labels: &[usize],
) -> Result<Vec<f64>, ClusterError> {
    if labels.len() != points.len() {
        return Err(ClusterError::LengthMismatch {
            labels: labels.len(),
            points: points.len(),
        });
    }
    check_points(points)?;
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_labels];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(ClusterError::SingleCluster);
    }

    Ok((0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut sums = vec![0.0; n_labels];
            let pi = points[i].as_ref();
            for (j, pj) in points.iter().enumerate() {
                if j != i {
                    sums[labels[j]] += sq_dist(pi, pj.as_ref()).sqrt();
                }
            }
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..n_labels)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect())
}

/// Mean silhouette over all points.
pub fn silhouette<P: AsRef<[f64]> + Sync>(points: &[P], labels: &[usize]) -> Result<f64, ClusterError> {
    let s = silhouette_samples(points, labels)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Mean silhouette over a seeded random subset of `sample_size` points, for
/// corpora where the quadratic full computation is too slow.
pub fn silhouette_sampled<P: AsRef<[f64]> + Sync>(
    points: &[P],
    labels: &[usize],
    sample_size: usize,
    seed: u64,
) -> Result<f64, ClusterError> {
    if sample_size >= points.len() {
        return silhouette(points, labels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, points.len(), sample_size).into_vec();
    let sub_points: Vec<&[f64]> = picked.iter().map(|&i| points[i].as_ref()).collect();
    let sub_labels: Vec<usize> = picked.iter().map(|&i| labels[i]).collect();
    silhouette(&sub_points, &sub_labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionReport {
    pub scores: BTreeMap<usize, f64>,
    pub inertias: BTreeMap<usize, f64>,
    pub chosen_k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans: KMeansOptions,
    /// Compute silhouettes on a seeded subsample of this size; `None` uses every point.
    pub silhouette_sample: Option<usize>,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            k_min: DEFAULT_K_MIN,
            k_max: DEFAULT_K_MAX,
            kmeans: KMeansOptions::default(),
            silhouette_sample: None,
        }
    }
}

/// Fits every k in the range and keeps the silhouette argmax (smaller k on ties).
/// Also returns the fit for the chosen k.
pub fn select_k_with_fit<P: AsRef<[f64]> + Sync>(
    points: &[P],
    seed: u64,
    options: SelectOptions,
) -> Result<(KSelectionReport, KMeansFit), ClusterError> {
    let SelectOptions { k_min, k_max, .. } = options;
    if k_min < 2 || k_max < k_min {
        return Err(ClusterError::InvalidRange { k_min, k_max });
    }
    let mut scores = BTreeMap::new();
    let mut inertias = BTreeMap::new();
    let mut best: Option<(f64, KMeansFit)> = None;
    for k in k_min..=k_max {
        let fit = kmeans(points, k, seed, options.kmeans)?;
        let score = match options.silhouette_sample {
            Some(m) => silhouette_sampled(points, &fit.labels, m, seed)?,
            None => silhouette(points, &fit.labels)?,
        };
        scores.insert(k, score);
        inertias.insert(k, fit.inertia);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, fit));
        }
    }
    let (_, fit) = best.expect("non-empty range");
    Ok((
        KSelectionReport {
            scores,
            inertias,
            chosen_k: fit.k,
            seed,
        },
        fit,
    ))
}

pub fn select_k<P: AsRef<[f64]> + Sync>(
    points: &[P],
    seed: u64,
    options: SelectOptions,
) -> Result<KSelectionReport, ClusterError> {
    select_k_with_fit(points, seed, options).map(|(r, _)| r)
}

/// Archetype layer persisted for persona generation: one cluster per entry id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub seed: u64,
    /// Cluster means in embedding space. Use [`ClusterModel::unit_centroid`]
    /// for cosine queries.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
    pub inertia: f64,
    pub silhouette: f64,
}

impl ClusterModel {
    pub fn from_fit(entry_ids: &[String], fit: &KMeansFit, silhouette: f64) -> Self {
        Self {
            k: fit.k,
            seed: fit.seed,
            centroids: fit.centroids.clone(),
            assignments: entry_ids.iter().cloned().zip(fit.labels.iter().copied()).collect(),
            inertia: fit.inertia,
            silhouette,
        }
    }

    /// The centroid rescaled to unit length.
    pub fn unit_centroid(&self, cluster: usize, provider_id: &str) -> Result<Embedding, ClusterError> {
        let c = self.centroids.get(cluster).ok_or(ClusterError::UnknownCluster(cluster))?;
        Ok(Embedding::normalized(c.clone(), provider_id)?)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.values().for_each(|&c| sizes[c] += 1);
        sizes
    }
}

/// Writes each assignment into the index's `cluster_id` metadata.
pub fn annotate_index(model: &ClusterModel, index: &VectorIndex) -> Result<usize, IndexError> {
    index.assign_clusters(&model.assignments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pts(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    /// Exhaustive minimum-inertia 2-partition.
    fn best_partition(points: &[Vec<f64>]) -> (f64, Vec<usize>) {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut inertia = 0.0;
            for c in 0..2 {
                let members: Vec<&Vec<f64>> =
                    points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                let mean: Vec<f64> = (0..points[0].len())
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                inertia += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
            }
            if inertia < best.0 {
                best = (inertia, labels);
            }
        }
        best
    }

    #[test]
    fn one_dimensional_two_clusters() {
        let p = pts(&[&[0.0], &[1.0], &[10.0], &[11.0]]);
        let (oracle_inertia, oracle_labels) = best_partition(&p);
        let fit = kmeans(&p, 2, 42, KMeansOptions::default()).unwrap();
        assert!((fit.inertia - oracle_inertia).abs() < 1e-12);
        assert_eq!(fit.labels[0] == fit.labels[1], oracle_labels[0] == oracle_labels[1]);
        assert_ne!(fit.labels[0], fit.labels[2]);
        let mut c: Vec<f64> = fit.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.5, 10.5]);
    }

    #[test]
    fn identical_points_rejected() {
        let p = pts(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(
            kmeans(&p, 2, 0, KMeansOptions::default()),
            Err(ClusterError::TooFewDistinct { k: 2, distinct: 1 })
        ));
        assert!(matches!(kmeans(&p, 1, 0, KMeansOptions::default()), Err(ClusterError::InvalidK(1))));
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random(), rng.random()]).collect();
        let a = kmeans(&p, 4, 9, KMeansOptions::default()).unwrap();
        let b = kmeans(&p, 4, 9, KMeansOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let p: Vec<Vec<f64>> = (0..80).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
            let fit = kmeans_single(&p, 2 + trial % 5, trial as u64, 100, 1e-9).unwrap();
            for w in fit.inertia_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.inertia_history);
            }
        }
    }

    #[test]
    fn no_empty_clusters_with_duplicates() {
        // Many duplicates make empty clusters likely after an update.
        let mut p = vec![vec![0.0, 0.0]; 20];
        p.extend([vec![5.0, 5.0], vec![5.0, 5.1], vec![9.0, 0.0]]);
        for seed in 0..30 {
            let fit = kmeans_single(&p, 4, seed, 100, 1e-6).unwrap();
            let mut sizes = [0; 4];
            fit.labels.iter().for_each(|&l| sizes[l] += 1);
            assert!(sizes.iter().all(|&s| s > 0), "seed {seed}: {sizes:?}");
        }
    }

    #[test]
    fn silhouette_hand_example() {
        // a = 1, b = (10 + sqrt(101)) / 2 for every point.
        let p = pts(&[&[0.0, 0.0], &[0.0, 1.0], &[10.0, 0.0], &[10.0, 1.0]]);
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        let expected = (b - 1.0) / b;
        let s = silhouette(&p, &[0, 0, 1, 1]).unwrap();
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.9003).abs() < 1e-4);
    }

    #[test]
    fn silhouette_zero_when_a_equals_b() {
        // Basis vectors are pairwise equidistant, so a = b for every point.
        let p = pts(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(silhouette(&p, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_requires_two_clusters() {
        let p = pts(&[&[0.0], &[1.0]]);
        assert!(matches!(silhouette(&p, &[0, 0]), Err(ClusterError::SingleCluster)));
    }

    #[test]
    fn singleton_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random(), rng.random()]).collect();
        let r = select_k(&p, 1, SelectOptions { k_min: 4, k_max: 4, ..Default::default() }).unwrap();
        assert_eq!(r.chosen_k, 4);
        assert_eq!(r.scores.len(), 1);
        assert!(matches!(
            select_k(&p, 1, SelectOptions { k_min: 5, k_max: 4, ..Default::default() }),
            Err(ClusterError::InvalidRange { .. })
        ));
    }

    #[test]
    fn subsample_matches_full_when_large() {
        let p = pts(&[&[0.0], &[0.5], &[9.0], &[9.5]]);
        let l = [0, 0, 1, 1];
        assert_eq!(silhouette_sampled(&p, &l, 10, 3).unwrap(), silhouette(&p, &l).unwrap());
        let s = silhouette_sampled(&p, &l, 3, 3);
        assert!(s.is_ok() || matches!(s, Err(ClusterError::SingleCluster)));
    }
}
