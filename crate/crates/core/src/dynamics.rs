// SPDX-License-Identifier: Apache-2.0

//! Adaptive drift checking and graph-local score/embedding updates.
//!
//! After each training interval a few recently trained samples are compared
//! against their cached scores. If the weighted relative discrepancy exceeds
//! `delta`, the nodes with the largest `uniqueness * staleness` (no two
//! adjacent) are recomputed exactly and become anchors. Each non-anchor with
//! anchor neighbours whose affinity `w_ij * exp(-0.1 |I_i - I_j|)` exceeds
//! `beta_aff` moves halfway toward the weight-normalized mean of those
//! anchors. If the anchors' embeddings moved by more than `delta_h` on
//! average, embeddings are propagated the same way and the graph is repaired.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Serialize, Serializer};

use crate::error::{GraceError, Result};
use crate::knn_graph::{LshIndex, MutualKnnGraph};
use crate::store::{EmbeddingTable, SampleId, ScoreLedger, SelectionConfig};

/// Decay applied to score disagreement inside the affinity.
pub const AFFINITY_DECAY: f64 = 0.1;

/// Exact per-sample embeddings and importance scores, aligned with the
/// requested ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub embeddings: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

/// Anything that can score and embed samples under the current model.
pub trait FeatureProvider {
    fn num_samples(&self) -> usize;
    fn extract_features(&self, ids: &[SampleId]) -> Result<Features>;
}

/// Outcome of the discrepancy check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Discrepancy {
    Value(f64),
    /// Some sample's reference score is 0, so its ratio has no denominator.
    Undefined,
}

impl Discrepancy {
    pub fn value(&self) -> Option<f64> {
        match self {
            Discrepancy::Value(v) => Some(*v),
            Discrepancy::Undefined => None,
        }
    }
}

/// Mean over samples of
/// `sum_k lambda_c^(t_k - t) |I_k - I_t| / sum_k lambda_c^(t_k - t) I_t`.
pub fn discrepancy_check(
    ledger: &ScoreLedger,
    sample_set: &[SampleId],
    window: &[u64],
    lambda_c: f64,
    current_step: u64,
) -> Result<Discrepancy> {
    if sample_set.is_empty() {
        return Err(GraceError::domain("discrepancy check on an empty sample set"));
    }
    if window.is_empty() {
        return Err(GraceError::domain("discrepancy check with an empty step window"));
    }
    if !(lambda_c > 0.0 && lambda_c < 1.0) {
        return Err(GraceError::domain(format!("lambda_c must be in (0, 1), got {lambda_c}")));
    }
    let mut total = 0.0;
    let mut undefined = false;
    for &id in sample_set {
        if id.0 >= ledger.len() {
            return Err(GraceError::domain(format!("sample {id} out of range")));
        }
        let now = ledger
            .score_at(id, current_step)
            .ok_or_else(|| GraceError::domain(format!("sample {id} has no score at step {current_step}")))?;
        let mut num = 0.0;
        let mut den = 0.0;
        for &tk in window {
            let past = ledger
                .score_at(id, tk)
                .ok_or_else(|| GraceError::domain(format!("sample {id} has no score at step {tk}")))?;
            let w = lambda_c.powf(tk as f64 - current_step as f64);
            num += w * (past - now).abs();
            den += w * now;
        }
        if now == 0.0 {
            undefined = true;
        } else {
            total += num / den;
        }
    }
    if undefined {
        return Ok(Discrepancy::Undefined);
    }
    Ok(Discrepancy::Value(total / sample_set.len() as f64))
}

/// Steps in `(current_step - t_c, current_step]` recorded for every sample.
pub fn window_steps(ledger: &ScoreLedger, samples: &[SampleId], current_step: u64, t_c: usize) -> Vec<u64> {
    let mut steps: Option<BTreeSet<u64>> = None;
    for &id in samples {
        let mine: BTreeSet<u64> = ledger
            .history(id)
            .map(|(s, _)| s)
            .filter(|&s| s + t_c as u64 > current_step && s <= current_step)
            .collect();
        steps = Some(match steps {
            None => mine,
            Some(acc) => acc.intersection(&mine).copied().collect(),
        });
    }
    steps.unwrap_or_default().into_iter().collect()
}

/// `|I_i - weighted neighbour mean|`, 0 for isolated nodes.
pub fn uniqueness(g: &MutualKnnGraph, ledger: &ScoreLedger, id: SampleId) -> f64 {
    let nbrs = g.neighbors(id);
    if nbrs.is_empty() {
        return 0.0;
    }
    let (wsum, wscore) = nbrs
        .iter()
        .fold((0.0, 0.0), |(ws, acc), &(j, w)| (ws + w, acc + w * ledger.current(j)));
    (ledger.current(id) - wscore / wsum).abs()
}

/// `uniqueness * (current_step - t_history)`.
pub fn update_priority(g: &MutualKnnGraph, ledger: &ScoreLedger, id: SampleId, current_step: u64) -> f64 {
    let staleness = current_step.saturating_sub(ledger.t_history(id));
    uniqueness(g, ledger, id) * staleness as f64
}

/// Greedy pick by descending priority, skipping graph neighbours of anything
/// already picked and anything with zero priority.
pub fn select_recal_set(g: &MutualKnnGraph, ledger: &ScoreLedger, current_step: u64, k_recal: usize) -> Vec<SampleId> {
    let mut order: Vec<(f64, SampleId)> = (0..g.n())
        .map(SampleId)
        .map(|id| (update_priority(g, ledger, id, current_step), id))
        .filter(|(p, _)| *p > 0.0)
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<SampleId> = Vec::with_capacity(k_recal);
    let mut blocked: BTreeSet<SampleId> = BTreeSet::new();
    for (_, id) in order {
        if picked.len() >= k_recal {
            break;
        }
        if blocked.contains(&id) {
            continue;
        }
        picked.push(id);
        blocked.extend(g.neighbors(id).iter().map(|e| e.0));
    }
    picked
}

/// `w_ij * exp(-0.1 |I_i - I_j|)` over an existing edge.
pub fn affinity(g: &MutualKnnGraph, ledger: &ScoreLedger, i: SampleId, j: SampleId) -> Result<f64> {
    let w = g
        .weight(i, j)
        .ok_or_else(|| GraceError::domain(format!("affinity on non-edge ({i}, {j})")))?;
    Ok(w * (-AFFINITY_DECAY * (ledger.current(i) - ledger.current(j)).abs()).exp())
}

/// A non-anchor together with the anchor neighbours that pass the affinity gate.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub node: SampleId,
    /// `(anchor, w_ij)`, sorted by anchor id.
    pub anchors: Vec<(SampleId, f64)>,
}

pub fn qualifying_neighborhoods<V>(
    g: &MutualKnnGraph,
    ledger: &ScoreLedger,
    anchors: &BTreeMap<SampleId, V>,
    beta_aff: f64,
) -> Vec<Neighborhood> {
    let mut touched: BTreeSet<SampleId> = BTreeSet::new();
    for &a in anchors.keys() {
        touched.extend(g.neighbors(a).iter().map(|e| e.0).filter(|j| !anchors.contains_key(j)));
    }
    touched
        .into_iter()
        .filter_map(|node| {
            let qualifying: Vec<(SampleId, f64)> = g
                .neighbors(node)
                .iter()
                .filter(|(j, _)| anchors.contains_key(j))
                .filter(|&&(j, w)| w * (-AFFINITY_DECAY * (ledger.current(node) - ledger.current(j)).abs()).exp() > beta_aff)
                .copied()
                .collect();
            (!qualifying.is_empty()).then_some(Neighborhood { node, anchors: qualifying })
        })
        .collect()
}

/// Change-stability witness for one propagated node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityRecord {
    pub node: SampleId,
    pub old: f64,
    pub new: f64,
    /// `0.5 * max(0, max_j |I_new(j) - I_old(i)|)` over the qualifying anchors.
    pub bound: f64,
}

impl StabilityRecord {
    pub fn holds(&self) -> bool {
        (self.new - self.old).abs() <= self.bound * (1.0 + 1e-12) + 1e-15
    }
}

/// New score for every non-anchor with qualifying anchor neighbours:
/// `0.5 * I_old + 0.5 * sum_j alpha_ij * I_new(j)`, `alpha_ij = w_ij / sum w`.
pub fn propagate_scores(
    g: &MutualKnnGraph,
    ledger: &ScoreLedger,
    recal_new: &BTreeMap<SampleId, f64>,
    beta_aff: f64,
) -> BTreeMap<SampleId, f64> {
    propagate_scores_audited(g, ledger, recal_new, beta_aff).0
}

pub fn propagate_scores_audited(
    g: &MutualKnnGraph,
    ledger: &ScoreLedger,
    recal_new: &BTreeMap<SampleId, f64>,
    beta_aff: f64,
) -> (BTreeMap<SampleId, f64>, Vec<StabilityRecord>) {
    let mut out = BTreeMap::new();
    let mut audit = Vec::new();
    for hood in qualifying_neighborhoods(g, ledger, recal_new, beta_aff) {
        let old = ledger.current(hood.node);
        let wsum: f64 = hood.anchors.iter().map(|a| a.1).sum();
        let pulled: f64 = hood.anchors.iter().map(|&(j, w)| (w / wsum) * recal_new[&j]).sum();
        let new = 0.5 * old + 0.5 * pulled;
        let spread = hood
            .anchors
            .iter()
            .map(|(j, _)| (recal_new[j] - old).abs())
            .fold(0.0, f64::max);
        audit.push(StabilityRecord {
            node: hood.node,
            old,
            new,
            bound: 0.5 * spread,
        });
        out.insert(hood.node, new);
    }
    (out, audit)
}

/// Mean Euclidean shift between old and new rows over the same key set.
pub fn embedding_shift(old_rows: &BTreeMap<SampleId, Vec<f64>>, new_rows: &BTreeMap<SampleId, Vec<f64>>) -> Result<f64> {
    if old_rows.len() != new_rows.len() || old_rows.keys().ne(new_rows.keys()) {
        return Err(GraceError::domain("embedding_shift: old and new rows cover different samples"));
    }
    if old_rows.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (id, old) in old_rows {
        let new = &new_rows[id];
        if old.len() != new.len() {
            return Err(GraceError::domain(format!("embedding_shift: dimension mismatch at sample {id}")));
        }
        total += old.iter().zip(new).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Ok(total / old_rows.len() as f64)
}

/// Propagated rows for qualifying non-anchors:
/// `0.5 * h_i + 0.5 * sum_j w_ij h_j / sum_j w_ij` over the anchors' new rows.
/// Anchors themselves are not included in the output.
pub fn propagate_embeddings(
    g: &MutualKnnGraph,
    ledger: &ScoreLedger,
    emb: &EmbeddingTable,
    recal_new_rows: &BTreeMap<SampleId, Vec<f64>>,
    beta_aff: f64,
) -> BTreeMap<SampleId, Vec<f64>> {
    let d = emb.dim();
    let mut out = BTreeMap::new();
    for hood in qualifying_neighborhoods(g, ledger, recal_new_rows, beta_aff) {
        let wsum: f64 = hood.anchors.iter().map(|a| a.1).sum();
        let mut mean = vec![0.0; d];
        for &(j, w) in &hood.anchors {
            for (m, v) in mean.iter_mut().zip(&recal_new_rows[&j]) {
                *m += w * v;
            }
        }
        let row: Vec<f64> = emb
            .row(hood.node)
            .iter()
            .zip(&mean)
            .map(|(h, m)| 0.5 * h + 0.5 * (m / wsum))
            .collect();
        out.insert(hood.node, row);
    }
    out
}

/// Everything the dynamic update maintains between intervals.
#[derive(Clone, Debug)]
pub struct GraphState {
    pub graph: MutualKnnGraph,
    pub emb: EmbeddingTable,
    pub ledger: ScoreLedger,
    pub lsh: LshIndex,
}

impl GraphState {
    /// Builds graph and LSH index over `emb`.
    pub fn new(emb: EmbeddingTable, ledger: ScoreLedger, cfg: &SelectionConfig) -> Result<Self> {
        let graph = MutualKnnGraph::build(&emb, cfg.k)?;
        let lsh = LshIndex::build(&emb, cfg.lsh_tables, cfg.lsh_planes, cfg.seed)?;
        Ok(GraphState { graph, emb, ledger, lsh })
    }
}

#[derive(Clone, Debug)]
pub struct UpdatePlan {
    pub step: u64,
    pub triggered: bool,
    pub delta_i: Discrepancy,
    pub check_set: Vec<SampleId>,
    pub recal_set: Vec<SampleId>,
    /// Present only when triggered.
    pub delta_h: Option<f64>,
    /// Non-anchor scores written by propagation.
    pub propagated_scores: BTreeMap<SampleId, f64>,
    /// Non-anchor rows written by propagation; empty unless the embedding check fired.
    pub propagated_embeddings: BTreeMap<SampleId, Vec<f64>>,
    pub graph_repaired: bool,
    pub stability: Vec<StabilityRecord>,
}

impl UpdatePlan {
    pub fn event(&self) -> UpdateEvent {
        UpdateEvent {
            step: self.step,
            delta_i: self.delta_i.value(),
            triggered: self.triggered,
            recal: self.recal_set.iter().map(|r| r.0).collect(),
            delta_h: self.delta_h,
            graph_repaired: self.graph_repaired,
        }
    }
}

/// One line of the update-event log.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct UpdateEvent {
    pub step: u64,
    /// `null` when the discrepancy was undefined.
    #[serde(rename = "delta_I", serialize_with = "finite_or_null")]
    pub delta_i: Option<f64>,
    pub triggered: bool,
    pub recal: Vec<usize>,
    #[serde(rename = "delta_H", serialize_with = "finite_or_null")]
    pub delta_h: Option<f64>,
    pub graph_repaired: bool,
}

fn finite_or_null<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => s.serialize_f64(*x),
        _ => s.serialize_none(),
    }
}

/// One check-and-update round at `current_step`. Either the whole update
/// lands in `state` or, on error, none of it does.
pub fn check_and_update<P, R>(
    state: &mut GraphState,
    last_core: &[SampleId],
    provider: &P,
    cfg: &SelectionConfig,
    rng: &mut R,
    current_step: u64,
) -> Result<UpdatePlan>
where
    P: FeatureProvider + ?Sized,
    R: Rng + ?Sized,
{
    let n = state.emb.n();
    if last_core.is_empty() {
        return Err(GraceError::domain("check_and_update needs a nonempty last coreset"));
    }
    let mut core: Vec<SampleId> = last_core.to_vec();
    core.sort_unstable();
    core.dedup();
    if let Some(bad) = core.iter().find(|c| c.0 >= n) {
        return Err(GraceError::domain(format!("coreset member {bad} out of range")));
    }
    let amount = cfg.n_s_check.min(core.len());
    let mut check_set: Vec<SampleId> = index::sample(rng, core.len(), amount).into_iter().map(|i| core[i]).collect();
    check_set.sort_unstable();

    let mut next = state.clone();

    // Check samples without a score at this step are scored now.
    let missing: Vec<SampleId> = check_set
        .iter()
        .copied()
        .filter(|&id| next.ledger.score_at(id, current_step).is_none())
        .collect();
    if !missing.is_empty() {
        let feats = provider.extract_features(&missing)?;
        check_features(&feats, missing.len(), next.emb.dim())?;
        for (&id, &s) in missing.iter().zip(&feats.scores) {
            next.ledger.record_score(id, current_step, s)?;
            next.ledger.mark_accurate(id, current_step)?;
        }
    }

    let window = window_steps(&next.ledger, &check_set, current_step, cfg.t_c);
    let delta_i = discrepancy_check(&next.ledger, &check_set, &window, cfg.lambda_c, current_step)?;
    let triggered = match delta_i {
        Discrepancy::Value(v) => v > cfg.delta,
        Discrepancy::Undefined => cfg.delta.is_finite(),
    };
    let mut plan = UpdatePlan {
        step: current_step,
        triggered,
        delta_i,
        check_set,
        recal_set: Vec::new(),
        delta_h: None,
        propagated_scores: BTreeMap::new(),
        propagated_embeddings: BTreeMap::new(),
        graph_repaired: false,
        stability: Vec::new(),
    };
    if !triggered {
        *state = next;
        return Ok(plan);
    }

    let recal = select_recal_set(&next.graph, &next.ledger, current_step, cfg.k_recal);
    let feats = if recal.is_empty() {
        Features {
            embeddings: Vec::new(),
            scores: Vec::new(),
        }
    } else {
        provider.extract_features(&recal)?
    };
    check_features(&feats, recal.len(), next.emb.dim())?;

    // Scores: recomputed anchors plus samples already exact at this step.
    let before = next.ledger.clone();
    let mut anchors: BTreeMap<SampleId, f64> = recal.iter().copied().zip(feats.scores.iter().copied()).collect();
    for i in 0..n {
        let id = SampleId(i);
        if before.t_history(id) == current_step && before.score_at(id, current_step).is_some() {
            anchors.entry(id).or_insert_with(|| before.current(id));
        }
    }
    let (propagated, stability) = propagate_scores_audited(&next.graph, &before, &anchors, cfg.beta_aff);
    for (&id, &s) in recal.iter().zip(&feats.scores) {
        next.ledger.record_score(id, current_step, s)?;
        next.ledger.mark_accurate(id, current_step)?;
    }
    for (&id, &s) in &propagated {
        next.ledger.record_score(id, current_step, s)?;
    }

    // Embeddings: only recomputed anchors carry new rows.
    let old_rows: BTreeMap<SampleId, Vec<f64>> = recal.iter().map(|&id| (id, next.emb.row(id).to_vec())).collect();
    let new_rows: BTreeMap<SampleId, Vec<f64>> = recal.iter().copied().zip(feats.embeddings.iter().cloned()).collect();
    let delta_h = embedding_shift(&old_rows, &new_rows)?;
    if delta_h > cfg.delta_h {
        let rows = propagate_embeddings(&next.graph, &before, &next.emb, &new_rows, cfg.beta_aff);
        let mut changed: Vec<SampleId> = Vec::with_capacity(new_rows.len() + rows.len());
        for (&id, row) in new_rows.iter().chain(rows.iter()) {
            next.emb.set_row(id, row)?;
            next.lsh.update(id, row)?;
            changed.push(id);
        }
        next.graph = next.graph.repair(&next.lsh, &next.emb, &changed)?;
        plan.propagated_embeddings = rows;
        plan.graph_repaired = true;
    }

    plan.recal_set = recal;
    plan.delta_h = Some(delta_h);
    plan.propagated_scores = propagated;
    plan.stability = stability;
    *state = next;
    Ok(plan)
}

fn check_features(feats: &Features, expected: usize, dim: usize) -> Result<()> {
    if feats.scores.len() != expected || feats.embeddings.len() != expected {
        return Err(GraceError::Provider(format!(
            "provider returned {} scores / {} embeddings for {expected} samples",
            feats.scores.len(),
            feats.embeddings.len()
        )));
    }
    if feats.embeddings.iter().any(|r| r.len() != dim) {
        return Err(GraceError::Provider(format!("provider embeddings must have dimension {dim}")));
    }
    Ok(())
}
