//! Normalized maximum eigengap spectral clustering with k-means++ on the
//! spectral embedding.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pooldec::SpeakerEmbedding;

pub const MAX_P: usize = 30;
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;
const IDENTICAL_TOL: f64 = 1e-9;

/// Symmetric cosine-similarity matrix with a unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl AffinityMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Shape(format!("{} values for a {n}x{n} affinity", values.len())));
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// `A[i,j] = e_i · e_j`, mirrored from the upper triangle and clamped to
/// `[-1, 1]`.
pub fn cosine_affinity(embeddings: &[SpeakerEmbedding]) -> AffinityMatrix {
    let n = embeddings.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let d: f64 = embeddings[i]
                .as_slice()
                .iter()
                .zip(embeddings[j].as_slice())
                .map(|(a, b)| a * b)
                .sum();
            let d = d.clamp(-1.0, 1.0);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    AffinityMatrix { n, values }
}

/// Diagnostics for one binarization level.
#[derive(Debug, Clone, PartialEq)]
pub struct NmeTrace {
    pub p: usize,
    /// Largest eigengap divided by the largest eigenvalue.
    pub g: f64,
    /// `p / (n · g)`; the chosen `p` minimizes this.
    pub ratio: f64,
    /// Speaker count implied by the largest eigengap.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub estimated_k: usize,
    pub chosen_p: usize,
    pub nme_trace: Vec<NmeTrace>,
}

/// Keeps each row's `p` largest entries (ties go to the lower column index)
/// as ones, then symmetrizes by averaging with the transpose.
pub fn binarize(a: &AffinityMatrix, p: usize) -> DMatrix<f64> {
    let n = a.n;
    let mut b = DMatrix::zeros(n, n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let row = a.row(i);
        idx.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        for &j in idx.iter().take(p) {
            b[(i, j)] = 1.0;
        }
    }
    (&b + b.transpose()) * 0.5
}

/// Unnormalized graph Laplacian `D − A`.
pub fn laplacian(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut l = -a.clone();
    for i in 0..a.nrows() {
        l[(i, i)] += a.row(i).sum();
    }
    l
}

/// Eigenvalues ascending, with eigenvectors as matching columns.
pub fn sorted_eigen(l: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = l.nrows();
    let eig = SymmetricEigen::try_new(l, 1e-12, 10_000)
        .ok_or_else(|| Error::Eigen(format!("symmetric eigensolver did not converge on a {n}x{n} Laplacian")))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite eigenvalue".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Eigengap statistics for eigenvalues `λ_1 ≤ … ≤ λ_n`: the 1-based index
/// of the largest gap among `λ_{i+1} − λ_i, i ≤ max_speakers`, and that gap
/// relative to `λ_n`. With a known count only the gap after `λ_k` counts,
/// which rules out graphs fragmented into more than `k` components.
fn eigengap(values: &[f64], max_speakers: usize, known_k: Option<usize>) -> (usize, f64) {
    let mut best = (1, f64::NEG_INFINITY);
    let range = match known_k {
        Some(k) => k..=k.min(values.len() - 1),
        None => 1..=max_speakers.min(values.len() - 1),
    };
    for i in range {
        let gap = values[i] - values[i - 1];
        if gap > best.1 {
            best = (i, gap);
        }
    }
    let top = values[values.len() - 1];
    let g = if top > 0.0 { best.1.max(0.0) / top } else { 0.0 };
    (best.0, g)
}

pub fn nme_sc_cluster(a: &AffinityMatrix, max_speakers: usize, known_k: Option<usize>) -> Result<ClusterResult> {
    nme_sc_cluster_seeded(a, max_speakers, known_k, 0)
}

/// Sweeps the binarization level `p`, keeps the one with the smallest
/// `p / (n · g_p)`, estimates the speaker count from its largest eigengap
/// (unless `known_k` is given) and runs k-means on the leading eigenvectors.
pub fn nme_sc_cluster_seeded(
    a: &AffinityMatrix,
    max_speakers: usize,
    known_k: Option<usize>,
    seed: u64,
) -> Result<ClusterResult> {
    let n = a.n;
    if n == 0 {
        return Err(Error::Degenerate("cannot cluster zero embeddings".into()));
    }
    if known_k == Some(0) || known_k.is_some_and(|k| k > n) {
        return Err(Error::Config(format!("known speaker count {known_k:?} is invalid for {n} windows")));
    }
    if n == 1 || (known_k.is_none() && a.values.iter().all(|v| *v >= 1.0 - IDENTICAL_TOL)) {
        return Ok(ClusterResult {
            labels: vec![0; n],
            estimated_k: 1,
            chosen_p: 0,
            nme_trace: Vec::new(),
        });
    }
    let max_speakers = max_speakers.clamp(1, n - 1);
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, usize, DMatrix<f64>)> = None;
    for p in 1..=(n - 1).min(MAX_P) {
        let (values, vectors) = sorted_eigen(laplacian(&binarize(a, p)))?;
        let (k, g) = eigengap(&values, max_speakers, known_k);
        let ratio = if g > 0.0 { p as f64 / (n as f64 * g) } else { f64::INFINITY };
        trace.push(NmeTrace { p, g, ratio, k });
        if best.as_ref().is_none_or(|b| ratio < b.0) {
            best = Some((ratio, p, k, vectors));
        }
    }
    let (_, chosen_p, est_k, vectors) = best.expect("at least one p is swept");
    let k = known_k.unwrap_or(est_k);
    let points: Vec<Vec<f64>> = (0..n).map(|r| (0..k).map(|c| vectors[(r, c)]).collect()).collect();
    let labels = canonical_labels(&kmeans(&points, k, KMEANS_RESTARTS, seed).labels);
    let estimated_k = labels.iter().max().map_or(0, |m| m + 1).max(1);
    Ok(ClusterResult {
        labels,
        estimated_k: if known_k.is_some() { k } else { estimated_k },
        chosen_p,
        nme_trace: trace,
    })
}

/// Renumbers labels in order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from `restarts` k-means++ seedings; the lowest-inertia
/// run wins (earliest on ties).
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> KMeansResult {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let run = lloyd(points, kmeans_pp(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (best, d) = centers
                .iter()
                .enumerate()
                .map(|(c, ctr)| (c, sq_dist(p, ctr)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            inertia += d;
            best
        })
        .collect();
    (labels, inertia)
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> KMeansResult {
    let k = centers.len();
    let dim = points[0].len();
    let (mut labels, mut inertia) = assign(points, &centers);
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = points
                    .iter()
                    .zip(&labels)
                    .map(|(p, &l)| sq_dist(p, &centers[l]))
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                    .0;
                centers[c] = points[far].clone();
            }
        }
        let (next, next_inertia) = assign(points, &centers);
        let done = next == labels;
        labels = next;
        inertia = next_inertia;
        if done {
            break;
        }
    }
    KMeansResult {
        labels,
        centroids: centers,
        inertia,
    }
}
