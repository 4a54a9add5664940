// SPDX-License-Identifier: Apache-2.0

//! Mutual k-NN graph over embeddings.
//!
//! An undirected edge `(i, j)` exists iff `j` is among `i`'s `k` nearest
//! neighbours (Euclidean) and `i` is among `j`'s. Edge weight is
//! `exp(-||h_i - h_j||^2 / 100)`. Distance ties at the k-th slot go to the
//! smaller sample id.
//!
//! The graph also keeps every node's directed top-k list so that local
//! repair can decide mutuality without a full rebuild.

mod lsh;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use lsh::{LshIndex, DEFAULT_PLANES, DEFAULT_TABLES};

use crate::error::{GraceError, Result};
use crate::store::{EmbeddingTable, SampleId};

/// Edge weights are `exp(-dist^2 / WEIGHT_SCALE)`.
pub const WEIGHT_SCALE: f64 = 100.0;

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn weight_from_sq(d2: f64) -> f64 {
    (-d2 / WEIGHT_SCALE).exp()
}

pub fn edge_weight(h_i: &[f64], h_j: &[f64]) -> Result<f64> {
    if h_i.len() != h_j.len() {
        return Err(GraceError::domain(format!(
            "edge_weight dimension mismatch: {} vs {}",
            h_i.len(),
            h_j.len()
        )));
    }
    if h_i.iter().chain(h_j).any(|v| !v.is_finite()) {
        return Err(GraceError::domain("edge_weight on non-finite input"));
    }
    Ok(weight_from_sq(squared_distance(h_i, h_j)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Neighbor {
    id: SampleId,
    dist2: f64,
}

#[inline]
fn closer(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.dist2.total_cmp(&b.dist2).then(a.id.cmp(&b.id))
}

/// `k` nearest of `node` among `candidates`, which must be duplicate-free.
fn top_k<I>(emb: &EmbeddingTable, node: SampleId, candidates: I, k: usize) -> Vec<Neighbor>
where
    I: IntoIterator<Item = SampleId>,
{
    let row = emb.row(node);
    let mut all: Vec<Neighbor> = candidates
        .into_iter()
        .filter(|&c| c != node)
        .map(|c| Neighbor {
            id: c,
            dist2: squared_distance(row, emb.row(c)),
        })
        .collect();
    if all.len() > k {
        all.select_nth_unstable_by(k, closer);
        all.truncate(k);
    }
    all.sort_by(closer);
    all
}

#[derive(Clone, Debug, PartialEq)]
pub struct MutualKnnGraph {
    k: usize,
    /// Sorted by neighbour id.
    adjacency: Vec<Vec<(SampleId, f64)>>,
    /// Directed top-k lists, nearest first.
    knn: Vec<Vec<Neighbor>>,
}

/// Where repair looks for replacement neighbours.
#[derive(Clone, Copy, Debug)]
pub enum CandidateSource<'a> {
    Lsh(&'a LshIndex),
    /// Every node; makes repair exact.
    Exhaustive,
}

impl CandidateSource<'_> {
    fn query(&self, emb: &EmbeddingTable, node: SampleId) -> Vec<SampleId> {
        match self {
            CandidateSource::Lsh(idx) => idx.candidates(emb.row(node)),
            CandidateSource::Exhaustive => (0..emb.n()).map(SampleId).collect(),
        }
    }
}

impl MutualKnnGraph {
    pub fn build(emb: &EmbeddingTable, k: usize) -> Result<Self> {
        let n = emb.n();
        if k == 0 {
            return Err(GraceError::domain("k must be >= 1"));
        }
        if k >= n {
            return Err(GraceError::domain(format!("k must be < n (k = {k}, n = {n})")));
        }
        let knn: Vec<Vec<Neighbor>> = (0..n)
            .into_par_iter()
            .map(|i| top_k(emb, SampleId(i), (0..n).map(SampleId), k))
            .collect();
        let mut g = MutualKnnGraph {
            k,
            adjacency: vec![Vec::new(); n],
            knn,
        };
        for i in 0..n {
            for nb in &g.knn[i] {
                let j = nb.id.0;
                if j > i && g.lists(SampleId(j), SampleId(i)) {
                    let w = weight_from_sq(nb.dist2);
                    g.adjacency[i].push((nb.id, w));
                    g.adjacency[j].push((SampleId(i), w));
                }
            }
        }
        for list in &mut g.adjacency {
            list.sort_by_key(|e| e.0);
        }
        Ok(g)
    }

    /// Whether `node`'s directed top-k list contains `other`.
    fn lists(&self, node: SampleId, other: SampleId) -> bool {
        self.knn[node.0].iter().any(|nb| nb.id == other)
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, id: SampleId) -> &[(SampleId, f64)] {
        &self.adjacency[id.0]
    }

    pub fn degree(&self, id: SampleId) -> usize {
        self.adjacency[id.0].len()
    }

    pub fn weight(&self, i: SampleId, j: SampleId) -> Option<f64> {
        let list = &self.adjacency[i.0];
        list.binary_search_by_key(&j, |e| e.0).ok().map(|p| list[p].1)
    }

    pub fn is_edge(&self, i: SampleId, j: SampleId) -> bool {
        self.weight(i, j).is_some()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges as `(min, max)` pairs, sorted.
    pub fn edge_set(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for (i, list) in self.adjacency.iter().enumerate() {
            for &(j, _) in list {
                if i < j.0 {
                    out.insert((i, j.0));
                }
            }
        }
        out
    }

    /// Directed top-k list of `id`, nearest first.
    pub fn knn_list(&self, id: SampleId) -> Vec<SampleId> {
        self.knn[id.0].iter().map(|nb| nb.id).collect()
    }

    /// Full invariant audit against the current embeddings.
    pub fn audit(&self, emb: &EmbeddingTable) -> Result<()> {
        if emb.n() != self.n() {
            return Err(GraceError::domain("graph and embeddings disagree on n"));
        }
        for (i, list) in self.adjacency.iter().enumerate() {
            let id = SampleId(i);
            if list.len() > self.k {
                return Err(GraceError::domain(format!("node {i} has degree {} > k = {}", list.len(), self.k)));
            }
            if list.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(GraceError::domain(format!("node {i} adjacency not sorted/unique")));
            }
            for &(j, w) in list {
                if j == id {
                    return Err(GraceError::domain(format!("self-loop at {i}")));
                }
                match self.weight(j, id) {
                    Some(back) if back == w => {}
                    _ => return Err(GraceError::domain(format!("edge ({i}, {j}) not symmetric"))),
                }
                let expect = weight_from_sq(squared_distance(emb.row(id), emb.row(j)));
                if (expect - w).abs() > 1e-9 || !(w > 0.0 && w <= 1.0) {
                    return Err(GraceError::domain(format!(
                        "edge ({i}, {j}) weight {w} disagrees with embeddings ({expect})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Local repair after the rows of `changed` were replaced in `emb`,
    /// using LSH buckets plus each changed node's former 2-hop neighbourhood.
    pub fn repair(&self, idx: &LshIndex, emb: &EmbeddingTable, changed: &[SampleId]) -> Result<Self> {
        self.repair_with(CandidateSource::Lsh(idx), emb, changed)
    }

    pub fn repair_with(&self, source: CandidateSource<'_>, emb: &EmbeddingTable, changed: &[SampleId]) -> Result<Self> {
        let n = self.n();
        if emb.n() != n {
            return Err(GraceError::domain("graph and embeddings disagree on n"));
        }
        if let Some(bad) = changed.iter().find(|c| c.0 >= n) {
            return Err(GraceError::domain(format!("changed id {bad} out of range (n = {n})")));
        }
        let changed: BTreeSet<SampleId> = changed.iter().copied().collect();
        if changed.is_empty() {
            return Ok(self.clone());
        }
        let k = self.k;
        let mut knn = self.knn.clone();

        // Changed nodes: fresh top-k over bucket candidates and the old 2-hop ball.
        let mut entering: Vec<Vec<SampleId>> = vec![Vec::new(); n];
        let changed_lists: Vec<(SampleId, Vec<Neighbor>, Vec<SampleId>)> = changed
            .par_iter()
            .map(|&c| {
                let mut cand = source.query(emb, c);
                cand.extend(self.two_hop(c));
                cand.sort_unstable();
                cand.dedup();
                let list = top_k(emb, c, cand.iter().copied(), k);
                (c, list, cand)
            })
            .collect();
        for (c, list, cand) in changed_lists {
            let row = emb.row(c);
            for &u in &cand {
                if u == c || changed.contains(&u) {
                    continue;
                }
                let probe = Neighbor {
                    id: c,
                    dist2: squared_distance(row, emb.row(u)),
                };
                // lists read from a dump hold only mutual neighbours and may be short
                let full = self.knn[u.0].len() >= self.k;
                if !full || self.knn[u.0].last().is_some_and(|kth| closer(&probe, kth).is_lt()) {
                    entering[u.0].push(c);
                }
            }
            knn[c.0] = list;
        }

        // Unchanged nodes whose list lost or may gain a changed node.
        let affected: Vec<SampleId> = (0..n)
            .map(SampleId)
            .filter(|u| !changed.contains(u))
            .filter(|u| !entering[u.0].is_empty() || self.knn[u.0].iter().any(|nb| changed.contains(&nb.id)))
            .collect();
        let affected_lists: Vec<(SampleId, Vec<Neighbor>)> = affected
            .par_iter()
            .map(|&u| {
                let lost = self.knn[u.0].iter().any(|nb| changed.contains(&nb.id));
                let mut cand: Vec<SampleId> = self.knn[u.0].iter().map(|nb| nb.id).collect();
                cand.extend_from_slice(&entering[u.0]);
                if lost {
                    cand.extend(source.query(emb, u));
                    cand.extend(self.two_hop(u));
                }
                cand.sort_unstable();
                cand.dedup();
                (u, top_k(emb, u, cand, k))
            })
            .collect();
        for (u, list) in affected_lists {
            knn[u.0] = list;
        }

        // Re-enforce mutuality on the closure.
        let closure: BTreeSet<SampleId> = changed.iter().copied().chain(affected.iter().copied()).collect();
        let mut adjacency = self.adjacency.clone();
        for &x in &closure {
            for &(y, _) in &self.adjacency[x.0] {
                adjacency[y.0].retain(|e| e.0 != x);
            }
            adjacency[x.0].clear();
        }
        let mut edges = BTreeSet::new();
        for &x in &closure {
            for nb in &knn[x.0] {
                let y = nb.id;
                if knn[y.0].iter().any(|m| m.id == x) {
                    edges.insert((x.min(y), x.max(y)));
                }
            }
        }
        for (a, b) in edges {
            let w = weight_from_sq(squared_distance(emb.row(a), emb.row(b)));
            adjacency[a.0].push((b, w));
            adjacency[b.0].push((a, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|e| e.0);
            list.dedup_by_key(|e| e.0);
        }
        Ok(MutualKnnGraph { k, adjacency, knn })
    }

    /// Former directed and mutual neighbours of `node`, and theirs.
    fn two_hop(&self, node: SampleId) -> Vec<SampleId> {
        let mut out = Vec::new();
        let first: Vec<SampleId> = self.knn[node.0]
            .iter()
            .map(|nb| nb.id)
            .chain(self.adjacency[node.0].iter().map(|e| e.0))
            .collect();
        for &f in &first {
            out.push(f);
            out.extend(self.knn[f.0].iter().map(|nb| nb.id));
            out.extend(self.adjacency[f.0].iter().map(|e| e.0));
        }
        out
    }

    /// One JSON line per node: `{"id":i,"nbrs":[..],"w":[..]}`.
    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for (i, list) in self.adjacency.iter().enumerate() {
            let line = GraphLine {
                id: i,
                nbrs: list.iter().map(|e| e.0 .0).collect(),
                w: list.iter().map(|e| e.1).collect(),
            };
            serde_json::to_writer(&mut writer, &line)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Loads a dumped graph. The dump carries only mutual edges, so each
    /// node's directed list is reconstructed from its mutual neighbours.
    pub fn read_jsonl<R: BufRead>(reader: R, k: usize) -> Result<Self> {
        let mut lines: Vec<GraphLine> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| GraceError::Format(format!("graph line {}: {e}", lineno + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: GraphLine = serde_json::from_str(&line)
                .map_err(|e| GraceError::Format(format!("graph line {}: {e}", lineno + 1)))?;
            if parsed.id != lines.len() {
                return Err(GraceError::Format(format!(
                    "graph line {} has id {}, expected {}",
                    lineno + 1,
                    parsed.id,
                    lines.len()
                )));
            }
            if parsed.nbrs.len() != parsed.w.len() {
                return Err(GraceError::Format(format!("graph line {}: nbrs/w length mismatch", lineno + 1)));
            }
            lines.push(parsed);
        }
        let n = lines.len();
        let mut adjacency = Vec::with_capacity(n);
        let mut knn = Vec::with_capacity(n);
        for line in lines {
            let mut list: Vec<(SampleId, f64)> = Vec::with_capacity(line.nbrs.len());
            for (&j, &w) in line.nbrs.iter().zip(&line.w) {
                if j >= n || !(w > 0.0 && w <= 1.0) {
                    return Err(GraceError::Data {
                        row: line.id,
                        col: j,
                        msg: format!("bad edge to {j} with weight {w}"),
                    });
                }
                list.push((SampleId(j), w));
            }
            list.sort_by_key(|e| e.0);
            let mut directed: Vec<Neighbor> = list
                .iter()
                .map(|&(id, w)| Neighbor {
                    id,
                    dist2: -WEIGHT_SCALE * w.ln(),
                })
                .collect();
            directed.sort_by(closer);
            knn.push(directed);
            adjacency.push(list);
        }
        let g = MutualKnnGraph { k, adjacency, knn };
        for (i, list) in g.adjacency.iter().enumerate() {
            if list.len() > k {
                return Err(GraceError::Data {
                    row: i,
                    col: 0,
                    msg: format!("degree {} exceeds k = {k}", list.len()),
                });
            }
            for &(j, w) in list {
                if g.weight(j, SampleId(i)) != Some(w) {
                    return Err(GraceError::Data {
                        row: i,
                        col: j.0,
                        msg: "asymmetric edge".into(),
                    });
                }
            }
        }
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphLine {
    id: usize,
    nbrs: Vec<usize>,
    w: Vec<f64>,
}

/// Convenience wrapper over [`MutualKnnGraph::build`].
pub fn build_graph(emb: &EmbeddingTable, k: usize) -> Result<MutualKnnGraph> {
    MutualKnnGraph::build(emb, k)
}

pub fn build_lsh_index(emb: &EmbeddingTable, num_tables: usize, planes: usize, seed: u64) -> Result<LshIndex> {
    LshIndex::build(emb, num_tables, planes, seed)
}

pub fn repair_graph(
    g: &MutualKnnGraph,
    idx: &LshIndex,
    emb: &EmbeddingTable,
    changed: &[SampleId],
) -> Result<MutualKnnGraph> {
    g.repair(idx, emb, changed)
}
