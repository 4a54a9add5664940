// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::BTreeMap;

use common::*;
use grace_core::dynamics::*;
use grace_core::knn_graph::MutualKnnGraph;
use grace_core::orchestrator::{run_grace_observed, StepBudget};
use grace_core::simulator::{SimConfig, SimState};
use grace_core::{EmbeddingTable, GraceError, Result, SampleId, ScoreLedger, SelectionConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_ledger(rng: &mut ChaCha8Rng, n: usize, step: u64) -> ScoreLedger {
    let mut l = ScoreLedger::new(n);
    for i in 0..n {
        l.record_score(SampleId(i), step, rng.random::<f64>()).unwrap();
    }
    l
}

fn independent(g: &MutualKnnGraph, set: &[SampleId]) -> bool {
    set.iter().all(|&a| set.iter().all(|&b| !g.is_edge(a, b)))
}

#[test]
fn discrepancy_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut l = ScoreLedger::new(20);
    let steps = [6u64, 7, 8, 9, 10];
    for &s in &steps {
        for i in 0..20 {
            l.record_score(SampleId(i), s, 0.1 + rng.random::<f64>()).unwrap();
        }
    }
    let set = ids(0..20);
    let got = discrepancy_check(&l, &set, &steps, 0.99, 10).unwrap().value().unwrap();
    let mut total = 0.0;
    for i in 0..20 {
        let now = l.score_at(SampleId(i), 10).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for &s in &steps {
            let w = 0.99f64.powi(s as i32 - 10);
            num += w * (l.score_at(SampleId(i), s).unwrap() - now).abs();
            den += w * now;
        }
        total += num / den;
    }
    assert!((got - total / 20.0).abs() < 1e-12);
}

#[test]
fn embedding_shift_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let old: BTreeMap<SampleId, Vec<f64>> = (0..10).map(|i| (SampleId(i * 3), gaussian_rows(&mut rng, 1, 5, 1.0).remove(0))).collect();
    let new: BTreeMap<SampleId, Vec<f64>> = old.keys().map(|&k| (k, gaussian_rows(&mut rng, 1, 5, 1.0).remove(0))).collect();
    let expect: f64 = old.keys().map(|k| dist2(&old[k], &new[k]).sqrt()).sum::<f64>() / 10.0;
    assert!((embedding_shift(&old, &new).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn embedding_propagation_three_anchors() {
    // node 0 at the origin, anchors 1..=3 at distinct distances; k = 3 makes the
    // 4-node graph complete
    let rows = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![-3.0, 0.5]];
    let emb = table(rows.clone());
    let g = MutualKnnGraph::build(&emb, 3).unwrap();
    let mut l = ScoreLedger::new(4);
    for i in 0..4 {
        l.record_score(SampleId(i), 1, 0.5).unwrap();
    }
    let new_rows: BTreeMap<SampleId, Vec<f64>> = BTreeMap::from([
        (SampleId(1), vec![2.0, 1.0]),
        (SampleId(2), vec![-1.0, 4.0]),
        (SampleId(3), vec![0.5, -0.5]),
    ]);
    let out = propagate_embeddings(&g, &l, &emb, &new_rows, 0.0);
    let w: Vec<f64> = (1..4).map(|j| (-dist2(&rows[0], &rows[j]) / 100.0).exp()).collect();
    let ws: f64 = w.iter().sum();
    for dim in 0..2 {
        let mean: f64 = (1..4).map(|j| w[j - 1] * new_rows[&SampleId(j)][dim]).sum::<f64>() / ws;
        assert!((out[&SampleId(0)][dim] - (0.5 * rows[0][dim] + 0.5 * mean)).abs() < 1e-12);
    }
    assert_eq!(out.len(), 1);
}

#[test]
fn priority_argmax_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let emb = table(gaussian_rows(&mut rng, 30, 3, 1.0));
    let g = MutualKnnGraph::build(&emb, 4).unwrap();
    let mut l = random_ledger(&mut rng, 30, 1);
    for i in 0..30 {
        l.mark_accurate(SampleId(i), rng.random_range(0..=1)).unwrap();
    }
    let scan: Vec<f64> = (0..30)
        .map(|i| {
            let nb = g.neighbors(SampleId(i));
            let uni = if nb.is_empty() {
                0.0
            } else {
                let ws: f64 = nb.iter().map(|e| e.1).sum();
                (l.current(SampleId(i)) - nb.iter().map(|e| e.1 * l.current(e.0)).sum::<f64>() / ws).abs()
            };
            uni * (7 - l.t_history(SampleId(i))) as f64
        })
        .collect();
    for (i, expected) in scan.iter().enumerate() {
        assert!((update_priority(&g, &l, SampleId(i), 7) - expected).abs() < 1e-12);
    }
    let best = (0..30).max_by(|&a, &b| scan[a].total_cmp(&scan[b]).then(b.cmp(&a))).unwrap();
    assert_eq!(select_recal_set(&g, &l, 7, 1), vec![SampleId(best)]);
}

#[test]
fn recal_set_is_independent_and_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let emb = table(gaussian_rows(&mut rng, 50, 3, 1.0));
        let g = MutualKnnGraph::build(&emb, 5).unwrap();
        let l = random_ledger(&mut rng, 50, 1);
        let set = select_recal_set(&g, &l, 9, 8);
        assert!(set.len() <= 8);
        assert!(independent(&g, &set));
        // replay: each pick is the best remaining non-blocked positive candidate
        let mut blocked = std::collections::BTreeSet::new();
        let mut order: Vec<(f64, usize)> = (0..50).map(|i| (update_priority(&g, &l, SampleId(i), 9), i)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut replay = Vec::new();
        for (p, i) in order {
            if replay.len() == 8 || p <= 0.0 {
                break;
            }
            if blocked.contains(&i) {
                continue;
            }
            replay.push(SampleId(i));
            blocked.extend(g.neighbors(SampleId(i)).iter().map(|e| e.0 .0));
        }
        assert_eq!(set, replay);
    }
}

#[test]
fn edgeless_graph_selects_nothing() {
    // every node isolated, so uniqueness and hence priority are zero everywhere
    let dump: String = (0..6).map(|i| format!("{{\"id\":{i},\"nbrs\":[],\"w\":[]}}\n")).collect();
    let g = MutualKnnGraph::read_jsonl(dump.as_bytes(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l = random_ledger(&mut rng, 6, 1);
    assert!(select_recal_set(&g, &l, 10, 3).is_empty());
}

#[test]
fn complete_graph_selects_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let emb = table(gaussian_rows(&mut rng, 5, 3, 1.0));
    let g = MutualKnnGraph::build(&emb, 4).unwrap();
    assert_eq!(g.edge_count(), 10);
    let l = random_ledger(&mut rng, 5, 1);
    assert_eq!(select_recal_set(&g, &l, 10, 3).len(), 1);
}

/// Frozen provider: always answers with the table and ledger it was built from.
struct Frozen {
    emb: EmbeddingTable,
    scores: Vec<f64>,
}

impl FeatureProvider for Frozen {
    fn num_samples(&self) -> usize {
        self.emb.n()
    }
    fn extract_features(&self, ids: &[SampleId]) -> Result<Features> {
        Ok(Features {
            embeddings: ids.iter().map(|&i| self.emb.row(i).to_vec()).collect(),
            scores: ids.iter().map(|&i| self.scores[i.0]).collect(),
        })
    }
}

fn cfg_small() -> SelectionConfig {
    SelectionConfig {
        k: 4,
        k_recal: 5,
        n_s_check: 10,
        lsh_tables: 4,
        lsh_planes: 6,
        beta_aff: 0.0,
        ..SelectionConfig::default()
    }
}

#[test]
fn frozen_provider_never_triggers() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let emb = table(gaussian_rows(&mut rng, 40, 3, 1.0));
    let scores: Vec<f64> = (0..40).map(|_| 0.1 + rng.random::<f64>()).collect();
    let mut l = ScoreLedger::new(40);
    for (i, &s) in scores.iter().enumerate() {
        l.record_score(SampleId(i), 0, s).unwrap();
    }
    let provider = Frozen { emb: emb.clone(), scores };
    let cfg = cfg_small();
    let mut state = GraphState::new(emb, l, &cfg).unwrap();
    let core = ids(0..15);
    for step in 1..=5u64 {
        for &c in &core {
            let s = provider.scores[c.0];
            state.ledger.record_score(c, step, s).unwrap();
            state.ledger.mark_accurate(c, step).unwrap();
        }
        let plan = check_and_update(&mut state, &core, &provider, &cfg, &mut rng, step).unwrap();
        assert_eq!(plan.delta_i, Discrepancy::Value(0.0));
        assert!(!plan.triggered);
    }
}

/// Returns the stored rows unchanged but shifted scores.
struct ScoreOnly {
    emb: EmbeddingTable,
    bump: f64,
}

impl FeatureProvider for ScoreOnly {
    fn num_samples(&self) -> usize {
        self.emb.n()
    }
    fn extract_features(&self, ids: &[SampleId]) -> Result<Features> {
        Ok(Features {
            embeddings: ids.iter().map(|&i| self.emb.row(i).to_vec()).collect(),
            scores: ids.iter().map(|&i| 0.2 + self.bump * (i.0 % 3) as f64).collect(),
        })
    }
}

#[test]
fn score_drift_without_embedding_shift_keeps_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let emb = table(gaussian_rows(&mut rng, 40, 3, 1.0));
    let mut l = ScoreLedger::new(40);
    for i in 0..40 {
        l.record_score(SampleId(i), 0, 0.3 + 0.01 * i as f64).unwrap();
    }
    let cfg = SelectionConfig { delta: 0.0, ..cfg_small() };
    let mut state = GraphState::new(emb.clone(), l, &cfg).unwrap();
    let core = ids(0..10);
    for &c in &core {
        state.ledger.record_score(c, 5, 0.9).unwrap();
        state.ledger.mark_accurate(c, 5).unwrap();
    }
    let graph_before = state.graph.clone();
    let provider = ScoreOnly { emb: emb.clone(), bump: 0.1 };
    let plan = check_and_update(&mut state, &core, &provider, &cfg, &mut rng, 5).unwrap();
    assert!(plan.triggered);
    assert!(!plan.recal_set.is_empty());
    assert_eq!(plan.delta_h, Some(0.0));
    assert!(!plan.graph_repaired);
    assert_eq!(state.graph, graph_before);
    assert_eq!(state.emb, emb);
    for &r in &plan.recal_set {
        assert_eq!(state.ledger.current(r), 0.2 + 0.1 * (r.0 % 3) as f64);
        assert_eq!(state.ledger.t_history(r), 5);
    }
    for (&id, &s) in &plan.propagated_scores {
        assert_eq!(state.ledger.current(id), s);
        assert_eq!(state.ledger.t_history(id), 0, "propagation must not refresh staleness");
    }
}

#[test]
fn provider_failure_is_atomic_after_trigger() {
    struct FailOnRecal(Frozen);
    impl FeatureProvider for FailOnRecal {
        fn num_samples(&self) -> usize {
            self.0.num_samples()
        }
        fn extract_features(&self, _: &[SampleId]) -> Result<Features> {
            Err(GraceError::Provider("device lost".into()))
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let emb = table(gaussian_rows(&mut rng, 30, 3, 1.0));
    let mut l = ScoreLedger::new(30);
    for i in 0..30 {
        l.record_score(SampleId(i), 0, 0.5).unwrap();
        l.record_score(SampleId(i), 1, 0.2 + 0.02 * i as f64).unwrap();
    }
    let cfg = SelectionConfig { delta: 0.0, ..cfg_small() };
    let mut state = GraphState::new(emb.clone(), l, &cfg).unwrap();
    let before = (state.ledger.clone(), state.graph.clone(), state.emb.clone());
    let provider = FailOnRecal(Frozen { emb, scores: vec![0.5; 30] });
    let err = check_and_update(&mut state, &ids(0..10), &provider, &cfg, &mut rng, 1).unwrap_err();
    assert!(matches!(err, GraceError::Provider(_)));
    assert_eq!((state.ledger, state.graph, state.emb), before);
}

#[test]
fn drift_run_audit() {
    let sim_cfg = SimConfig {
        n: 600,
        drift: 0.02,
        seed: 3,
        ..SimConfig::default()
    };
    let cfg = SelectionConfig {
        budget_b: 60,
        n_s: 200,
        delta: 0.0,
        delta_h: 0.0,
        seed: 3,
        ..SelectionConfig::default()
    };
    let mut sim = SimState::new(&sim_cfg).unwrap();
    let mut triggered = 0;
    let mut repaired = 0;
    let mut observer = |before: &GraphState, plan: &UpdatePlan, after: &GraphState| {
        assert!(plan.recal_set.len() <= cfg.k_recal);
        assert!(independent(&before.graph, &plan.recal_set));
        for i in 0..before.ledger.len() {
            let id = SampleId(i);
            assert!(after.ledger.t_history(id) >= before.ledger.t_history(id));
            if after.ledger.t_history(id) != before.ledger.t_history(id) {
                assert!(plan.recal_set.contains(&id) || plan.check_set.contains(&id));
            }
        }
        for r in plan.stability.iter() {
            assert!(r.holds(), "{r:?}");
        }
        if plan.graph_repaired {
            after.graph.audit(&after.emb).unwrap();
            repaired += 1;
        }
        triggered += plan.triggered as usize;
    };
    let report = run_grace_observed(&cfg, &mut sim, StepBudget { total_steps: 120, warmup_steps: 10 }, Some(&mut observer)).unwrap();
    assert_eq!(report.train_steps, 120);
    assert!(triggered > 0);
    assert!(repaired > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn propagation_respects_stability_bound(seed in any::<u64>(), n in 6usize..40, anchors in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = table(gaussian_rows(&mut rng, n, 3, 2.0));
        let g = MutualKnnGraph::build(&emb, 3).unwrap();
        let l = random_ledger(&mut rng, n, 1);
        let chosen = rand::seq::index::sample(&mut rng, n, anchors.min(n));
        let recal: BTreeMap<SampleId, f64> = chosen.into_iter().map(|i| (SampleId(i), rng.random::<f64>() * 2.0)).collect();
        let (out, audit) = propagate_scores_audited(&g, &l, &recal, 0.0);
        prop_assert_eq!(out.len(), audit.len());
        for r in audit {
            prop_assert!(r.holds());
            prop_assert!(!recal.contains_key(&r.node));
        }
    }

    #[test]
    fn affinity_is_bounded_by_weight(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = table(gaussian_rows(&mut rng, 12, 2, 3.0));
        let g = MutualKnnGraph::build(&emb, 3).unwrap();
        let l = random_ledger(&mut rng, 12, 1);
        for i in 0..12 {
            for &(j, w) in g.neighbors(SampleId(i)) {
                let a = affinity(&g, &l, SampleId(i), j).unwrap();
                prop_assert!(a > 0.0 && a <= w);
            }
        }
    }
}
