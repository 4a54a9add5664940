// SPDX-License-Identifier: Apache-2.0

//! Graph-guided adaptive dynamic coreset selection.
//!
//! The pipeline: extract per-sample embeddings and EL2N importance scores,
//! build a mutual k-NN graph, then repeatedly draw a candidate pool, pick a
//! coreset greedily under a blended coverage/importance objective, train on
//! it, and check whether scores drifted enough to recompute a few anchors and
//! propagate their updates across the graph.

// Negated comparisons double as NaN rejection in validators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod dynamics;
pub mod error;
pub mod knn_graph;
pub mod orchestrator;
pub mod scoring;
pub mod selector;
pub mod simulator;
pub mod store;

pub use error::{GraceError, Result};
pub use store::{EmbeddingTable, SampleId, ScoreLedger, SelectionConfig};
