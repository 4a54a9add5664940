// SPDX-License-Identifier: Apache-2.0

//! Random-hyperplane (sign) LSH over embedding rows.
//!
//! Each table owns `planes` Gaussian hyperplanes through the origin; a row's
//! signature in that table is the bit pattern of `sign(<plane, row>)`.
//! Candidates for a query are the union of its buckets across all tables.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GraceError, Result};
use crate::store::{EmbeddingTable, SampleId};

pub const DEFAULT_TABLES: usize = 8;
pub const DEFAULT_PLANES: usize = 12;

#[derive(Clone, Debug)]
pub struct LshIndex {
    num_tables: usize,
    planes: usize,
    dim: usize,
    seed: u64,
    /// `num_tables * planes * dim`, table-major.
    hyperplanes: Vec<f64>,
    tables: Vec<HashMap<u64, Vec<SampleId>>>,
    /// `signatures[t][i]` is sample `i`'s bucket key in table `t`.
    signatures: Vec<Vec<u64>>,
}

impl LshIndex {
    pub fn build(emb: &EmbeddingTable, num_tables: usize, planes: usize, seed: u64) -> Result<Self> {
        if num_tables == 0 {
            return Err(GraceError::domain("LSH needs at least one table"));
        }
        if planes == 0 || planes > 64 {
            return Err(GraceError::domain(format!("LSH planes must be in [1, 64], got {planes}")));
        }
        let dim = emb.dim();
        if dim == 0 {
            return Err(GraceError::domain("LSH over 0-dimensional embeddings"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyperplanes: Vec<f64> = (0..num_tables * planes * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut index = LshIndex {
            num_tables,
            planes,
            dim,
            seed,
            hyperplanes,
            tables: vec![HashMap::new(); num_tables],
            signatures: vec![Vec::with_capacity(emb.n()); num_tables],
        };
        for (i, row) in emb.rows().enumerate() {
            for t in 0..num_tables {
                let sig = index.signature(t, row);
                index.signatures[t].push(sig);
                index.tables[t].entry(sig).or_default().push(SampleId(i));
            }
        }
        Ok(index)
    }

    pub fn num_tables(&self) -> usize {
        self.num_tables
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.signatures.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Signature of `row` in table `t`.
    pub fn signature(&self, t: usize, row: &[f64]) -> u64 {
        let base = t * self.planes * self.dim;
        let mut sig = 0u64;
        for p in 0..self.planes {
            let plane = &self.hyperplanes[base + p * self.dim..base + (p + 1) * self.dim];
            let dot: f64 = plane.iter().zip(row).map(|(a, b)| a * b).sum();
            if dot >= 0.0 {
                sig |= 1 << p;
            }
        }
        sig
    }

    /// Stored signature of sample `id` in table `t`.
    pub fn stored_signature(&self, t: usize, id: SampleId) -> u64 {
        self.signatures[t][id.0]
    }

    /// Re-hashes one sample after its embedding changed.
    pub fn update(&mut self, id: SampleId, row: &[f64]) -> Result<()> {
        if id.0 >= self.len() {
            return Err(GraceError::domain(format!("sample {id} not in LSH index")));
        }
        if row.len() != self.dim {
            return Err(GraceError::domain("LSH update with wrong dimension"));
        }
        for t in 0..self.num_tables {
            let old = self.signatures[t][id.0];
            let new = self.signature(t, row);
            if old == new {
                continue;
            }
            if let Some(bucket) = self.tables[t].get_mut(&old) {
                bucket.retain(|&x| x != id);
                if bucket.is_empty() {
                    self.tables[t].remove(&old);
                }
            }
            let bucket = self.tables[t].entry(new).or_default();
            let pos = bucket.binary_search(&id).unwrap_or_else(|p| p);
            bucket.insert(pos, id);
            self.signatures[t][id.0] = new;
        }
        Ok(())
    }

    /// Union of the query's buckets across tables, sorted and deduplicated.
    pub fn candidates(&self, row: &[f64]) -> Vec<SampleId> {
        let mut out = Vec::new();
        for t in 0..self.num_tables {
            if let Some(bucket) = self.tables[t].get(&self.signature(t, row)) {
                out.extend_from_slice(bucket);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn bucket(&self, t: usize, sig: u64) -> &[SampleId] {
        self.tables[t].get(&sig).map_or(&[], Vec::as_slice)
    }
}
