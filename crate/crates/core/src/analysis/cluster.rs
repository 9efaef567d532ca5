use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    /// `k × d`.
    pub centroids: Tensor<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // Rounding can walk off the end onto a zero-weight point.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap();
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means with k-means++ seeding and Lloyd iterations, in 64-bit.
///
/// Stops when no centroid moves by more than `tol` (Euclidean) or after
/// `max_iter` updates. A cluster left empty by an update is re-seeded at the
/// point farthest from its assigned centroid. Ties go to the lowest centroid
/// index.
pub fn kmeans_cluster<T: Scalar>(
    points: &Tensor<T>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterResult> {
    let n = points.rows();
    if points.rank() != 2 {
        return Err(Error::shape("k-means points", &[n, 0], points.shape()));
    }
    if k == 0 || n < k {
        return Err(Error::Config(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let d = points.cols();
    let pts: Vec<Vec<f64>> = (0..n).map(|i| points.row(i).iter().map(|v| v.as_f64()).collect()).collect();
    let mut rng = seed::stream(seed, "kmeans.init");
    let mut centroids = kmeans_pp(&pts, k, &mut rng);

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) { pts.iter().map(|p| nearest(p, centroids)).unzip() };

    let (mut assignments, mut dists) = assign(&centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut sizes = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assignments) {
            sizes[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        let mut taken = vec![false; n];
        for j in 0..k {
            let next = if sizes[j] > 0 {
                sums[j].iter().map(|s| s / sizes[j] as f64).collect()
            } else {
                // Farthest point from its current centroid, not already used for re-seeding.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(b.cmp(&a)))
                    .unwrap();
                taken[far] = true;
                dists[far] = 0.0;
                pts[far].clone()
            };
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        (assignments, dists) = assign(&centroids);
        let inertia: f64 = dists.iter().sum();
        let prev = *history.last().unwrap();
        debug_assert!(
            inertia <= prev + 1e-9 * prev.max(1.0),
            "k-means inertia rose from {prev} to {inertia}"
        );
        history.push(inertia);
        if shift <= tol {
            break;
        }
    }
    Ok(ClusterResult {
        assignments,
        centroids: Tensor::new(vec![k, d], centroids.concat())?,
        inertia: *history.last().unwrap(),
        inertia_history: history,
        iterations,
    })
}

/// Best of `n_init` k-means runs by final inertia (earliest run on ties).
/// Run 0 uses `seed` itself, so `n_init = 1` matches [`kmeans_cluster`].
pub fn kmeans_restarts<T: Scalar>(
    points: &Tensor<T>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    n_init: usize,
) -> Result<ClusterResult> {
    let mut best: Option<ClusterResult> = None;
    for run in 0..n_init.max(1) {
        let s = if run == 0 { seed } else { seed::derive_seed(seed, &format!("kmeans.restart.{run}")) };
        let r = kmeans_cluster(points, k, s, max_iter, tol)?;
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.unwrap())
}

/// Adjusted Rand index (pair counting, chance corrected).
///
/// When the chance-corrected denominator vanishes (both partitions trivial,
/// or fewer than two items) the partitions are identical and 1.0 is returned.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("partition lengths", &[a.len()], &[b.len()]));
    }
    let n = a.len();
    let relabel = |x: &[usize]| -> (Vec<usize>, usize) {
        let mut map = std::collections::HashMap::new();
        let ids = x
            .iter()
            .map(|v| {
                let next = map.len();
                *map.entry(*v).or_insert(next)
            })
            .collect();
        (ids, map.len())
    };
    let (ra, ka) = relabel(a);
    let (rb, kb) = relabel(b);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in ra.iter().zip(&rb) {
        table[x * kb + y] += 1;
    }
    let comb2 = |m: u64| (m as f64) * (m as f64 - 1.0) / 2.0;
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    let mut index = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let v = table[x * kb + y];
            rows[x] += v;
            cols[y] += v;
            index += comb2(v);
        }
    }
    let sa: f64 = rows.iter().map(|&m| comb2(m)).sum();
    let sb: f64 = cols.iter().map(|&m| comb2(m)).sum();
    let total = comb2(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max - expected == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentTable {
    /// `fold[j][c] = (count(j,c)/size(j)) / (count(c)/n)`; 0 for empty clusters or absent classes.
    pub fold: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub cluster_sizes: Vec<u64>,
    pub class_totals: Vec<u64>,
    pub empty_clusters: Vec<bool>,
}

/// Fold enrichment of each class within each cluster relative to its global frequency.
pub fn niche_enrichment(assignments: &[usize], labels: &[usize], k: usize, n_classes: usize) -> Result<EnrichmentTable> {
    if assignments.len() != labels.len() {
        return Err(Error::shape("assignments vs labels", &[labels.len()], &[assignments.len()]));
    }
    let mut counts = vec![vec![0u64; n_classes]; k];
    for (&j, &c) in assignments.iter().zip(labels) {
        if j >= k {
            return Err(Error::Config(format!("cluster index {j} out of range for k={k}")));
        }
        if c >= n_classes {
            return Err(Error::LabelOutOfRange { label: c, n_classes });
        }
        counts[j][c] += 1;
    }
    let n = labels.len() as f64;
    let cluster_sizes: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let class_totals: Vec<u64> = (0..n_classes).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
    let fold = counts
        .iter()
        .zip(&cluster_sizes)
        .map(|(row, &size)| {
            row.iter()
                .zip(&class_totals)
                .map(|(&m, &tot)| {
                    if size == 0 || tot == 0 {
                        0.0
                    } else {
                        (m as f64 / size as f64) / (tot as f64 / n)
                    }
                })
                .collect()
        })
        .collect();
    Ok(EnrichmentTable {
        fold,
        empty_clusters: cluster_sizes.iter().map(|&s| s == 0).collect(),
        counts,
        cluster_sizes,
        class_totals,
    })
}
