// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use grace_core::knn_graph::{CandidateSource, LshIndex, MutualKnnGraph};
use grace_core::SampleId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturb(rows: &mut [Vec<f64>], rng: &mut ChaCha8Rng, fraction: f64, noise: f64) -> Vec<SampleId> {
    let count = ((rows.len() as f64) * fraction).floor() as usize;
    let picked = rand::seq::index::sample(rng, rows.len(), count);
    let mut changed: Vec<SampleId> = picked.into_iter().map(SampleId).collect();
    changed.sort_unstable();
    for id in &changed {
        for v in rows[id.0].iter_mut() {
            *v += noise * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    changed
}

fn apply(g: &MutualKnnGraph, idx: &mut LshIndex, rows: &[Vec<f64>], changed: &[SampleId]) -> (MutualKnnGraph, MutualKnnGraph) {
    let emb = table(rows.to_vec());
    for &id in changed {
        idx.update(id, emb.row(id)).unwrap();
    }
    let lsh = g.repair(idx, &emb, changed).unwrap();
    let exact = g.repair_with(CandidateSource::Exhaustive, &emb, changed).unwrap();
    lsh.audit(&emb).unwrap();
    exact.audit(&emb).unwrap();
    (lsh, exact)
}

#[test]
fn build_matches_bruteforce_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (n, k, d) in [(200, 5, 8), (120, 1, 3), (300, 10, 16)] {
        let rows = gaussian_rows(&mut rng, n, d, 1.0);
        let g = MutualKnnGraph::build(&table(rows.clone()), k).unwrap();
        assert_eq!(g.edge_set(), mutual_knn_edges(&rows, k), "n={n} k={k}");
        g.audit(&table(rows)).unwrap();
    }
}

#[test]
fn lsh_candidate_recall_on_clustered_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = clustered_rows(&mut rng, 500, 16, 10, 4.0);
    let emb = table(rows.clone());
    let idx = LshIndex::build(&emb, 8, 12, 7).unwrap();
    let truth = knn_lists(&rows, 10);
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, nn) in truth.iter().enumerate() {
        let cands = idx.candidates(emb.row(SampleId(i)));
        hit += nn.iter().filter(|j| cands.binary_search(&SampleId(**j)).is_ok()).count();
        total += nn.len();
    }
    let recall = hit as f64 / total as f64;
    assert!(recall >= 0.9, "recall {recall}");
}

#[test]
fn repair_after_small_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut rows = clustered_rows(&mut rng, 300, 8, 6, 3.0);
    let g = MutualKnnGraph::build(&table(rows.clone()), 10).unwrap();
    let mut idx = LshIndex::build(&table(rows.clone()), 8, 12, 1).unwrap();
    let changed = perturb(&mut rows, &mut rng, 0.05, 0.3);
    let (lsh, exact) = apply(&g, &mut idx, &rows, &changed);
    let rebuilt = MutualKnnGraph::build(&table(rows.clone()), 10).unwrap();
    assert!(jaccard(&lsh.edge_set(), &rebuilt.edge_set()) >= 0.95);
    assert_eq!(exact, rebuilt);
}

#[test]
fn exhaustive_repair_of_everything_equals_rebuild() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = gaussian_rows(&mut rng, 150, 6, 1.0);
    let g = MutualKnnGraph::build(&table(rows), 6).unwrap();
    let moved = gaussian_rows(&mut rng, 150, 6, 1.0);
    let emb = table(moved);
    let all = ids(0..150);
    let exact = g.repair_with(CandidateSource::Exhaustive, &emb, &all).unwrap();
    assert_eq!(exact, MutualKnnGraph::build(&emb, 6).unwrap());
}

#[test]
fn untouched_edges_survive_repair() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rows = clustered_rows(&mut rng, 200, 6, 4, 3.0);
    let g = MutualKnnGraph::build(&table(rows.clone()), 5).unwrap();
    let mut idx = LshIndex::build(&table(rows.clone()), 8, 12, 2).unwrap();
    let changed = perturb(&mut rows, &mut rng, 0.03, 0.2);
    let (lsh, _) = apply(&g, &mut idx, &rows, &changed);
    let touched: std::collections::BTreeSet<usize> = changed.iter().map(|c| c.0).collect();
    for (i, j) in g.edge_set() {
        if touched.contains(&i) || touched.contains(&j) {
            continue;
        }
        // An untouched pair can lose its edge only if a changed node displaced it.
        if !lsh.is_edge(SampleId(i), SampleId(j)) {
            let gained = |x: usize| lsh.knn_list(SampleId(x)).iter().any(|c| touched.contains(&c.0));
            assert!(gained(i) || gained(j), "edge ({i}, {j}) dropped without cause");
        } else {
            assert_eq!(lsh.weight(SampleId(i), SampleId(j)), g.weight(SampleId(i), SampleId(j)));
        }
    }
}

#[test]
fn copy_onto_another_node_gives_unit_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rows = gaussian_rows(&mut rng, 60, 4, 1.0);
    let g = MutualKnnGraph::build(&table(rows.clone()), 4).unwrap();
    let mut idx = LshIndex::build(&table(rows.clone()), 8, 12, 0).unwrap();
    rows[7] = rows[30].clone();
    let (lsh, exact) = apply(&g, &mut idx, &rows, &[SampleId(7)]);
    assert_eq!(exact.weight(SampleId(7), SampleId(30)), Some(1.0));
    assert_eq!(lsh.weight(SampleId(7), SampleId(30)), Some(1.0));
}

#[test]
fn graph_read_from_dump_can_be_repaired() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut rows = gaussian_rows(&mut rng, 120, 4, 1.0);
    let g = MutualKnnGraph::build(&table(rows.clone()), 5).unwrap();
    let mut buf = Vec::new();
    g.write_jsonl(&mut buf).unwrap();
    let loaded = MutualKnnGraph::read_jsonl(&buf[..], 5).unwrap();
    let changed = perturb(&mut rows, &mut rng, 0.1, 0.5);
    let emb = table(rows);
    let repaired = loaded.repair_with(CandidateSource::Exhaustive, &emb, &changed).unwrap();
    repaired.audit(&emb).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn build_is_permutation_equivariant(seed in any::<u64>(), n in 8usize..60, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = gaussian_rows(&mut rng, n, 3, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| rows[p].clone()).collect();
        let g = MutualKnnGraph::build(&table(rows), k).unwrap();
        let h = MutualKnnGraph::build(&table(permuted), k).unwrap();
        let mapped: std::collections::BTreeSet<(usize, usize)> = h
            .edge_set()
            .into_iter()
            .map(|(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
            .collect();
        prop_assert_eq!(mapped, g.edge_set());
    }

    #[test]
    fn build_satisfies_invariants(seed in any::<u64>(), n in 3usize..80, k in 1usize..8) {
        prop_assume!(k < n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = gaussian_rows(&mut rng, n, 4, 2.0);
        let emb = table(rows.clone());
        let g = MutualKnnGraph::build(&emb, k).unwrap();
        prop_assert!(g.audit(&emb).is_ok());
        prop_assert_eq!(g.edge_set(), mutual_knn_edges(&rows, k));
    }

    #[test]
    fn graph_dump_roundtrips(seed in any::<u64>(), n in 3usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = table(gaussian_rows(&mut rng, n, 3, 1.0));
        let g = MutualKnnGraph::build(&emb, 2).unwrap();
        let mut buf = Vec::new();
        g.write_jsonl(&mut buf).unwrap();
        let back = MutualKnnGraph::read_jsonl(&buf[..], 2).unwrap();
        prop_assert_eq!(back.edge_set(), g.edge_set());
        let mut again = Vec::new();
        back.write_jsonl(&mut again).unwrap();
        prop_assert_eq!(again, buf);
    }
}
