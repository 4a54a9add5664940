// SPDX-License-Identifier: Apache-2.0

//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use std::collections::BTreeSet;

use grace_core::{EmbeddingTable, SampleId};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_rows<R: Rng>(rng: &mut R, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect()
        })
        .collect()
}

/// `clusters` Gaussian blobs with centres spread by `sep`.
pub fn clustered_rows<R: Rng>(rng: &mut R, n: usize, d: usize, clusters: usize, sep: f64) -> Vec<Vec<f64>> {
    let centres = gaussian_rows(rng, clusters, d, sep);
    (0..n)
        .map(|i| {
            centres[i % clusters]
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(rng);
                    c + z
                })
                .collect()
        })
        .collect()
}

/// Entries uniform in `[0, 1)`, so every pairwise cosine is non-negative.
pub fn nonneg_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() + 1e-3).collect()).collect()
}

pub fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
    EmbeddingTable::from_rows(rows).unwrap()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Each node's k nearest others, ordered by (distance, id).
pub fn knn_lists(rows: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..rows.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..rows.len())
                .filter(|&j| j != i)
                .map(|j| (dist2(&rows[i], &rows[j]), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|x| x.1).collect()
        })
        .collect()
}

/// O(n^2) mutual k-NN edge set as `(i, j)` with `i < j`.
pub fn mutual_knn_edges(rows: &[Vec<f64>], k: usize) -> BTreeSet<(usize, usize)> {
    let lists = knn_lists(rows, k);
    let mut out = BTreeSet::new();
    for (i, li) in lists.iter().enumerate() {
        for &j in li {
            if i < j && lists[j].contains(&i) {
                out.insert((i, j));
            }
        }
    }
    out
}

pub fn jaccard(a: &BTreeSet<(usize, usize)>, b: &BTreeSet<(usize, usize)>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `lambda * sum_p max_c cos(p, c) + (1 - lambda) * sum_c warped[c]`, 0 for an empty core.
pub fn rs_reference(rows: &[Vec<f64>], core: &[usize], pool: &[usize], warped: &[f64], lambda: f64) -> f64 {
    if core.is_empty() {
        return 0.0;
    }
    let repr: f64 = pool
        .iter()
        .map(|&p| core.iter().map(|&c| cosine(&rows[p], &rows[c])).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    let imp: f64 = core.iter().map(|&c| warped[c]).sum();
    lambda * repr + (1.0 - lambda) * imp
}

/// Minimizer of `0.5 (x - old)^2 + 0.5 sum_j a_j (x - t_j)^2` by bisection on
/// the derivative, which is increasing in `x`.
pub fn quadratic_argmin(old: f64, targets: &[(f64, f64)]) -> f64 {
    let deriv = |x: f64| (x - old) + targets.iter().map(|&(a, t)| a * (x - t)).sum::<f64>();
    let mut lo = targets.iter().map(|t| t.1).fold(old, f64::min) - 1.0;
    let mut hi = targets.iter().map(|t| t.1).fold(old, f64::max) + 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn ids(range: std::ops::Range<usize>) -> Vec<SampleId> {
    range.map(SampleId).collect()
}
