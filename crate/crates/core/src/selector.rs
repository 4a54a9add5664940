// SPDX-License-Identifier: Apache-2.0

//! Coreset objective and greedy selection.
//!
//! `RS(S) = lambda * R(S) + (1 - lambda) * sum_{i in S} warped[i]`, where
//! `R(S) = sum_{p in pool} max_{j in S} cos(h_p, h_j)` and `R({}) = 0`. The
//! pool is the candidate set itself. With non-negative similarities RS is
//! monotone submodular, so the greedy pick is within `1 - 1/e` of optimal;
//! [`brute_force_coreset`] enumerates subsets to check that on small inputs.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GraceError, Result};
use crate::store::{EmbeddingTable, SampleId};

/// Enumeration limit for the exhaustive oracle.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CoresetSelection {
    /// Greedy insertion order (sorted for the exhaustive oracle).
    pub members: Vec<SampleId>,
    pub objective_value: f64,
    /// Marginal gain of each member at insertion.
    pub gains: Vec<f64>,
}

/// One line of the coreset output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoresetEvent {
    pub step: u64,
    pub members: Vec<usize>,
    pub objective: f64,
    pub gains: Vec<f64>,
}

impl CoresetEvent {
    pub fn new(step: u64, sel: &CoresetSelection) -> Self {
        CoresetEvent {
            step,
            members: sel.members.iter().map(|m| m.0).collect(),
            objective: sel.objective_value,
            gains: sel.gains.clone(),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn checked_norm(emb: &EmbeddingTable, id: SampleId) -> Result<f64> {
    let nv = norm(emb.row(id));
    if nv == 0.0 {
        return Err(GraceError::domain(format!("sample {id} has a zero-norm embedding; cosine undefined")));
    }
    Ok(nv)
}

#[inline]
fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

pub fn cosine(emb: &EmbeddingTable, a: SampleId, b: SampleId) -> Result<f64> {
    let na = checked_norm(emb, a)?;
    let nb = checked_norm(emb, b)?;
    Ok(cosine_with_norms(emb.row(a), na, emb.row(b), nb))
}

fn check_ids(emb: &EmbeddingTable, ids: &[SampleId]) -> Result<()> {
    if let Some(bad) = ids.iter().find(|i| !emb.contains(**i)) {
        return Err(GraceError::domain(format!("sample {bad} out of range (n = {})", emb.n())));
    }
    Ok(())
}

/// Pool-by-candidate cosine matrix; the pool and candidates coincide here.
struct Similarity {
    ids: Vec<SampleId>,
    /// Row-major `sim[p * m + c]`.
    sim: Vec<f64>,
}

impl Similarity {
    fn new(emb: &EmbeddingTable, ids: Vec<SampleId>) -> Result<Self> {
        check_ids(emb, &ids)?;
        let norms = ids.iter().map(|&i| checked_norm(emb, i)).collect::<Result<Vec<_>>>()?;
        let m = ids.len();
        let sim: Vec<f64> = (0..m)
            .into_par_iter()
            .flat_map_iter(|p| {
                let (ids, norms) = (&ids, &norms);
                (0..m).map(move |c| cosine_with_norms(emb.row(ids[p]), norms[p], emb.row(ids[c]), norms[c]))
            })
            .collect();
        Ok(Similarity { ids, sim })
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    #[inline]
    fn at(&self, p: usize, c: usize) -> f64 {
        self.sim[p * self.ids.len() + c]
    }

    /// Objective of the member indices (into `ids`), summed in index order.
    fn objective(&self, members: &[usize], warped: &[f64], lambda: f64) -> f64 {
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        let repr = if sorted.is_empty() {
            0.0
        } else {
            (0..self.len())
                .map(|p| sorted.iter().map(|&c| self.at(p, c)).fold(f64::NEG_INFINITY, f64::max))
                .sum()
        };
        let imp: f64 = sorted.iter().map(|&c| warped[self.ids[c].0]).sum();
        lambda * repr + (1.0 - lambda) * imp
    }
}

/// `sum_{p in pool} max_{j in core} cos(h_p, h_j)`; 0 for an empty core.
pub fn representation_score(core: &[SampleId], pool: &[SampleId], emb: &EmbeddingTable) -> Result<f64> {
    check_ids(emb, core)?;
    check_ids(emb, pool)?;
    if core.is_empty() {
        return Ok(0.0);
    }
    let mut core: Vec<SampleId> = core.to_vec();
    core.sort_unstable();
    core.dedup();
    let core_norms = core.iter().map(|&j| checked_norm(emb, j)).collect::<Result<Vec<_>>>()?;
    let mut pool: Vec<SampleId> = pool.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let mut total = 0.0;
    for &p in &pool {
        let np = checked_norm(emb, p)?;
        let best = core
            .iter()
            .zip(&core_norms)
            .map(|(&j, &nj)| cosine_with_norms(emb.row(p), np, emb.row(j), nj))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total)
}

/// `lambda * R(core) + (1 - lambda) * sum_{i in core} warped[i]`.
pub fn coreset_objective(
    core: &[SampleId],
    pool: &[SampleId],
    emb: &EmbeddingTable,
    warped: &[f64],
    lambda_blend: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_blend) {
        return Err(GraceError::domain(format!("lambda_blend must be in [0, 1], got {lambda_blend}")));
    }
    let repr = representation_score(core, pool, emb)?;
    let mut core: Vec<SampleId> = core.to_vec();
    core.sort_unstable();
    core.dedup();
    let imp = importance_sum(&core, warped)?;
    Ok(lambda_blend * repr + (1.0 - lambda_blend) * imp)
}

fn importance_sum(core: &[SampleId], warped: &[f64]) -> Result<f64> {
    core.iter()
        .map(|c| {
            warped
                .get(c.0)
                .copied()
                .ok_or_else(|| GraceError::domain(format!("no warped score for sample {c}")))
        })
        .sum()
}

fn prepare(candidates: &[SampleId], budget_b: usize, warped: &[f64], lambda_blend: f64) -> Result<Vec<SampleId>> {
    if candidates.is_empty() {
        return Err(GraceError::domain("select_coreset on an empty candidate set"));
    }
    if !(0.0..=1.0).contains(&lambda_blend) {
        return Err(GraceError::domain(format!("lambda_blend must be in [0, 1], got {lambda_blend}")));
    }
    let mut ids = candidates.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if budget_b == 0 || budget_b > ids.len() {
        return Err(GraceError::domain(format!(
            "budget {budget_b} must be in [1, {}] (candidate count)",
            ids.len()
        )));
    }
    if let Some(bad) = ids.iter().find(|c| c.0 >= warped.len()) {
        return Err(GraceError::domain(format!("no warped score for sample {bad}")));
    }
    Ok(ids)
}

/// Greedy maximization of RS over `candidates`; the pool is `candidates`.
/// Ties go to the smaller sample id.
pub fn select_coreset(
    candidates: &[SampleId],
    budget_b: usize,
    emb: &EmbeddingTable,
    warped: &[f64],
    lambda_blend: f64,
) -> Result<CoresetSelection> {
    let ids = prepare(candidates, budget_b, warped, lambda_blend)?;
    let sim = Similarity::new(emb, ids)?;
    let m = sim.len();
    let mut cover: Option<Vec<f64>> = None;
    let mut taken = vec![false; m];
    let mut members = Vec::with_capacity(budget_b);
    let mut picked = Vec::with_capacity(budget_b);
    let mut gains = Vec::with_capacity(budget_b);

    for _ in 0..budget_b {
        let round: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|c| {
                if taken[c] {
                    return f64::NEG_INFINITY;
                }
                let repr: f64 = match &cover {
                    None => (0..m).map(|p| sim.at(p, c)).sum(),
                    Some(cov) => (0..m).map(|p| (sim.at(p, c) - cov[p]).max(0.0)).sum(),
                };
                lambda_blend * repr + (1.0 - lambda_blend) * warped[sim.ids[c].0]
            })
            .collect();
        let mut best = None;
        for (c, &g) in round.iter().enumerate() {
            if taken[c] {
                continue;
            }
            match best {
                Some((_, bg)) if g <= bg => {}
                _ => best = Some((c, g)),
            }
        }
        let (c, g) = best.expect("budget <= candidate count");
        taken[c] = true;
        picked.push(c);
        members.push(sim.ids[c]);
        gains.push(g);
        let cov = cover.get_or_insert_with(|| vec![f64::NEG_INFINITY; m]);
        for (p, slot) in cov.iter_mut().enumerate() {
            *slot = slot.max(sim.at(p, c));
        }
    }

    let objective_value = coreset_objective(&members, &sim.ids, emb, warped, lambda_blend)?;
    Ok(CoresetSelection {
        members,
        objective_value,
        gains,
    })
}

/// Exact maximizer of RS over all subsets of size `1..=budget_b`.
/// Ties go to the lexicographically smallest member list.
pub fn brute_force_coreset(
    candidates: &[SampleId],
    budget_b: usize,
    emb: &EmbeddingTable,
    warped: &[f64],
    lambda_blend: f64,
) -> Result<CoresetSelection> {
    let ids = prepare(candidates, budget_b, warped, lambda_blend)?;
    let m = ids.len();
    let total: u128 = (1..=budget_b).map(|s| binomial(m as u128, s as u128)).sum();
    if total > BRUTE_FORCE_LIMIT {
        return Err(GraceError::Resource(format!(
            "exhaustive search over {total} subsets exceeds {BRUTE_FORCE_LIMIT}"
        )));
    }
    let sim = Similarity::new(emb, ids)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for size in 1..=budget_b {
        for combo in (0..m).combinations(size) {
            let v = sim.objective(&combo, warped, lambda_blend);
            let better = match &best {
                None => true,
                Some((bv, bc)) => v > *bv || (v == *bv && combo < *bc),
            };
            if better {
                best = Some((v, combo));
            }
        }
    }
    let (_, combo) = best.expect("at least one subset");
    let members: Vec<SampleId> = combo.iter().map(|&c| sim.ids[c]).collect();
    let mut gains = Vec::with_capacity(combo.len());
    let mut prev = 0.0;
    for s in 1..=combo.len() {
        let v = sim.objective(&combo[..s], warped, lambda_blend);
        gains.push(v - prev);
        prev = v;
    }
    let objective_value = coreset_objective(&members, &sim.ids, emb, warped, lambda_blend)?;
    Ok(CoresetSelection {
        members,
        objective_value,
        gains,
    })
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}
