// SPDX-License-Identifier: Apache-2.0

//! A softmax classifier on Gaussian clusters, trained by mini-batch SGD.
//!
//! Embeddings are the class-logit vectors `W x`, so they move as the weights
//! train. An optional drift translates every input of class `c` along a fixed
//! random unit direction by `drift * step`, which keeps scores changing even
//! after the classifier has converged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FeatureProvider, Features};
use crate::error::{GraceError, Result};
use crate::scoring::el2n_score;
use crate::store::SampleId;

// Distinct streams derived from the one user seed.
const DATA_STREAM: u64 = 0x6461_7461;
const INIT_STREAM: u64 = 0x696e_6974;
const DRIFT_STREAM: u64 = 0x6472_6966;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Standard deviation of each cluster around its mean.
    pub cluster_spread: f64,
    pub learning_rate: f64,
    /// Standard deviation of the initial weights; 0 gives a uniform softmax.
    pub init_scale: f64,
    /// Per-step covariate shift along each class's drift direction.
    pub drift: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 2000,
            dim: 16,
            classes: 5,
            cluster_spread: 2.0,
            learning_rate: 0.1,
            init_scale: 0.01,
            drift: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(GraceError::config("classes", "need at least 2 classes"));
        }
        if self.n < self.classes {
            return Err(GraceError::config("n", format!("n = {} is below classes = {}", self.n, self.classes)));
        }
        if self.dim < 2 {
            return Err(GraceError::config("dim", "need dim >= 2"));
        }
        for (key, v) in [
            ("cluster_spread", self.cluster_spread),
            ("learning_rate", self.learning_rate),
            ("init_scale", self.init_scale),
            ("drift", self.drift),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(GraceError::config(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }
}

/// `c` clusters with standard-normal means; sample `i` has label `i % c`.
pub fn make_dataset(n: usize, d: usize, c: usize, cluster_spread: f64, seed: u64) -> Result<Dataset> {
    if c < 2 || d < 2 {
        return Err(GraceError::domain(format!("need c >= 2 and d >= 2, got c = {c}, d = {d}")));
    }
    if n < c {
        return Err(GraceError::domain(format!("n = {n} is below the class count {c}")));
    }
    if !cluster_spread.is_finite() || cluster_spread < 0.0 {
        return Err(GraceError::domain(format!("cluster spread must be finite and >= 0, got {cluster_spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_STREAM);
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let points = labels
        .iter()
        .map(|&y| {
            means[y]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + cluster_spread * z
                })
                .collect()
        })
        .collect();
    Ok(Dataset { points, labels, means })
}

#[derive(Clone, Debug)]
pub struct SimState {
    data: Dataset,
    /// `classes x dim`, row-major.
    weights: Vec<f64>,
    /// One unit vector per class.
    drift_dirs: Vec<Vec<f64>>,
    drift: f64,
    learning_rate: f64,
    seed: u64,
    step: u64,
}

impl SimState {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let data = make_dataset(cfg.n, cfg.dim, cfg.classes, cfg.cluster_spread, cfg.seed)?;
        Self::from_dataset(data, cfg)
    }

    /// Uses `data` as is; dataset-shape fields of `cfg` are ignored.
    pub fn from_dataset(data: Dataset, cfg: &SimConfig) -> Result<Self> {
        let (c, d) = (data.classes(), data.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
        let weights = (0..c * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                cfg.init_scale * z
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DRIFT_STREAM);
        let drift_dirs = (0..c)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Ok(SimState {
            data,
            weights,
            drift_dirs,
            drift: cfg.drift,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            step: 0,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.data.classes()
    }

    /// The sample's input at the current step, drift applied.
    pub fn input(&self, id: SampleId) -> Vec<f64> {
        let y = self.data.labels[id.0];
        let shift = self.drift * self.step as f64;
        self.data.points[id.0]
            .iter()
            .zip(&self.drift_dirs[y])
            .map(|(x, u)| x + shift * u)
            .collect()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(x.len())
            .map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn check_ids(&self, ids: &[SampleId]) -> Result<()> {
        match ids.iter().find(|i| i.0 >= self.data.len()) {
            Some(bad) => Err(GraceError::domain(format!("sample {bad} out of range"))),
            None => Ok(()),
        }
    }

    pub fn probabilities(&self, id: SampleId) -> Vec<f64> {
        softmax(&self.logits(&self.input(id)))
    }

    pub fn loss(&self, id: SampleId) -> f64 {
        let p = self.probabilities(id);
        -p[self.data.labels[id.0]].max(f64::MIN_POSITIVE).ln()
    }

    /// Mean cross-entropy over the whole training set.
    pub fn full_loss(&self) -> f64 {
        let losses: Vec<f64> = (0..self.data.len()).into_par_iter().map(|i| self.loss(SampleId(i))).collect();
        losses.iter().sum::<f64>() / losses.len() as f64
    }

    pub fn accuracy(&self) -> f64 {
        let hits = (0..self.data.len())
            .into_par_iter()
            .filter(|&i| {
                let p = self.probabilities(SampleId(i));
                argmax(&p) == self.data.labels[i]
            })
            .count();
        hits as f64 / self.data.len() as f64
    }

    /// One SGD step on the mean cross-entropy of `batch`. Returns the batch
    /// loss before the update.
    pub fn train_step(&mut self, batch: &[SampleId]) -> Result<f64> {
        if batch.is_empty() {
            return Err(GraceError::domain("train_step on an empty batch"));
        }
        self.check_ids(batch)?;
        let mut ordered = batch.to_vec();
        ordered.sort_unstable();
        let (c, d) = (self.classes(), self.data.dim());
        let mut grad = vec![0.0; c * d];
        let mut loss = 0.0;
        for &id in &ordered {
            let x = self.input(id);
            let mut p = softmax(&self.logits(&x));
            let y = self.data.labels[id.0];
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            p[y] -= 1.0;
            for (g_row, pk) in grad.chunks_exact_mut(d).zip(&p) {
                for (g, xi) in g_row.iter_mut().zip(&x) {
                    *g += pk * xi;
                }
            }
        }
        let scale = self.learning_rate / ordered.len() as f64;
        for (w, g) in self.weights.iter_mut().zip(&grad) {
            *w -= scale * g;
        }
        self.step += 1;
        Ok(loss / ordered.len() as f64)
    }

    fn features_of(&self, id: SampleId) -> Result<(Vec<f64>, f64)> {
        let logits = self.logits(&self.input(id));
        let p = softmax(&logits);
        let mut onehot = vec![0.0; p.len()];
        onehot[self.data.labels[id.0]] = 1.0;
        let score = el2n_score(&[p], &[onehot])?;
        Ok((logits, score))
    }
}

impl FeatureProvider for SimState {
    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn extract_features(&self, ids: &[SampleId]) -> Result<Features> {
        self.check_ids(ids)?;
        let rows: Vec<(Vec<f64>, f64)> = ids.par_iter().map(|&id| self.features_of(id)).collect::<Result<_>>()?;
        let (embeddings, scores) = rows.into_iter().unzip();
        Ok(Features { embeddings, scores })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
