// SPDX-License-Identifier: Apache-2.0

//! Sample identity, embeddings, and the importance-score ledger.
//!
//! Two on-disk formats live here because external trainers feed the engine
//! through them:
//!
//! * embedding file: `b"GRCE"`, `u32` version (= 1), `u64` n, `u32` d, then
//!   `n * d` little-endian `f32`, row-major;
//! * score stream: JSON lines `{"id":..,"step":..,"score":..}`.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{GraceError, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"GRCE";
pub const EMBEDDING_VERSION: u32 = 1;

/// Normalized scores are pulled into `[CLAMP_EPS, 1 - CLAMP_EPS]` before warping.
pub const CLAMP_EPS: f64 = 1e-6;

/// Dense sample index in `[0, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub usize);

impl SampleId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for SampleId {
    fn from(i: usize) -> Self {
        SampleId(i)
    }
}

/// Per-sample mean-pooled hidden states, `n` rows of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(GraceError::domain("embedding table needs at least one row"));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(GraceError::domain("embedding dimension must be >= 1"));
        }
        let n = rows.len();
        let mut data = Vec::with_capacity(n * d);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(GraceError::Data {
                    row: r,
                    col: row.len(),
                    msg: format!("row has length {}, expected {d}", row.len()),
                });
            }
            for (c, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(GraceError::Data {
                        row: r,
                        col: c,
                        msg: format!("non-finite value {v}"),
                    });
                }
            }
            data.extend(row);
        }
        Ok(EmbeddingTable { n, d, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, id: SampleId) -> &[f64] {
        let start = id.0 * self.d;
        &self.data[start..start + self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn contains(&self, id: SampleId) -> bool {
        id.0 < self.n
    }

    /// Overwrites one row. The new row must have dimension `d` and finite entries.
    pub fn set_row(&mut self, id: SampleId, row: &[f64]) -> Result<()> {
        if !self.contains(id) {
            return Err(GraceError::domain(format!("sample {id} out of range (n = {})", self.n)));
        }
        if row.len() != self.d {
            return Err(GraceError::domain(format!(
                "row for sample {id} has dimension {}, expected {}",
                row.len(),
                self.d
            )));
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(GraceError::Data {
                row: id.0,
                col: c,
                msg: "non-finite value".into(),
            });
        }
        let start = id.0 * self.d;
        self.data[start..start + self.d].copy_from_slice(row);
        Ok(())
    }

    /// Reads the binary embedding format. Values are stored as `f32` on disk.
    pub fn read_from<R: Read>(mut reader: R) -> Result<Self> {
        let mut header = [0u8; 20];
        reader
            .read_exact(&mut header)
            .map_err(|_| GraceError::Format("embedding header truncated".into()))?;
        if &header[0..4] != EMBEDDING_MAGIC {
            return Err(GraceError::Format("bad magic, expected \"GRCE\"".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != EMBEDDING_VERSION {
            return Err(GraceError::Format(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        if n == 0 || d == 0 {
            return Err(GraceError::Format(format!("header declares n = {n}, d = {d}; both must be >= 1")));
        }
        let len = n
            .checked_mul(d)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| GraceError::Format("header size overflows".into()))?;
        let mut payload = Vec::new();
        reader
            .read_to_end(&mut payload)
            .map_err(|e| GraceError::Format(format!("reading payload: {e}")))?;
        if payload.len() != len {
            return Err(GraceError::Format(format!(
                "payload has {} bytes, header implies {len}",
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(n * d);
        for (k, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(GraceError::Data {
                    row: k / d,
                    col: k % d,
                    msg: format!("non-finite value {v}"),
                });
            }
            data.push(v as f64);
        }
        Ok(EmbeddingTable { n, d, data })
    }

    /// Writes the binary embedding format, narrowing each value to `f32`.
    pub fn write_to<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(20 + self.data.len() * 4);
        buf.extend_from_slice(EMBEDDING_MAGIC);
        buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        writer.write_all(&buf)
    }
}

/// One line of the score stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub id: usize,
    pub step: u64,
    pub score: f64,
}

/// Raw importance scores, their per-step history, and the step of each
/// sample's last accurate recomputation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLedger {
    current: Vec<f64>,
    history: Vec<VecDeque<(u64, f64)>>,
    t_history: Vec<u64>,
    cap: Option<usize>,
}

impl ScoreLedger {
    /// Ledger for `n` samples with every score at 0 and no history.
    pub fn new(n: usize) -> Self {
        ScoreLedger {
            current: vec![0.0; n],
            history: vec![VecDeque::new(); n],
            t_history: vec![0; n],
            cap: None,
        }
    }

    /// Keeps at most `cap` history entries per sample (oldest dropped first).
    pub fn with_history_cap(mut self, cap: Option<usize>) -> Self {
        self.cap = cap.map(|c| c.max(1));
        self
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    fn check_id(&self, id: SampleId) -> Result<()> {
        if id.0 >= self.current.len() {
            return Err(GraceError::domain(format!(
                "sample {id} out of range (n = {})",
                self.current.len()
            )));
        }
        Ok(())
    }

    /// Appends `(step, score)` to the sample's history and makes it current.
    /// Does not touch `t_history`.
    pub fn record_score(&mut self, id: SampleId, step: u64, score: f64) -> Result<()> {
        self.check_id(id)?;
        if !score.is_finite() || score < 0.0 {
            return Err(GraceError::domain(format!(
                "score for sample {id} must be finite and >= 0, got {score}"
            )));
        }
        let hist = &mut self.history[id.0];
        if let Some(&(last, _)) = hist.back() {
            if step <= last {
                return Err(GraceError::Ordering { id: id.0, last, step });
            }
        }
        hist.push_back((step, score));
        if let Some(cap) = self.cap {
            while hist.len() > cap {
                hist.pop_front();
            }
        }
        self.current[id.0] = score;
        Ok(())
    }

    /// Marks the sample's score as accurately recomputed at `step`.
    /// `t_history` never moves backwards.
    pub fn mark_accurate(&mut self, id: SampleId, step: u64) -> Result<()> {
        self.check_id(id)?;
        let t = &mut self.t_history[id.0];
        if step < *t {
            return Err(GraceError::Ordering {
                id: id.0,
                last: *t,
                step,
            });
        }
        *t = step;
        Ok(())
    }

    #[inline]
    pub fn current(&self, id: SampleId) -> f64 {
        self.current[id.0]
    }

    pub fn current_scores(&self) -> &[f64] {
        &self.current
    }

    pub fn t_history(&self, id: SampleId) -> u64 {
        self.t_history[id.0]
    }

    pub fn history(&self, id: SampleId) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.history[id.0].iter().copied()
    }

    pub fn last_step(&self, id: SampleId) -> Option<u64> {
        self.history[id.0].back().map(|&(s, _)| s)
    }

    /// Score recorded at exactly `step`, if any.
    pub fn score_at(&self, id: SampleId, step: u64) -> Option<f64> {
        let hist = &self.history[id.0];
        hist.binary_search_by_key(&step, |&(s, _)| s)
            .ok()
            .map(|k| hist[k].1)
    }

    /// Min-max rescaling of `current` into `[0, 1]`; a degenerate range maps
    /// every sample to 0.5.
    pub fn min_max_normalize(&self) -> Vec<f64> {
        min_max_normalize(&self.current)
    }

    /// Rebuilds a ledger by replaying a score stream in order.
    pub fn replay(n: usize, records: &[ScoreRecord]) -> Result<Self> {
        let mut ledger = ScoreLedger::new(n);
        for rec in records {
            ledger.record_score(SampleId(rec.id), rec.step, rec.score)?;
        }
        Ok(ledger)
    }

    /// All history entries ordered by `(step, id)`.
    pub fn records(&self) -> Vec<ScoreRecord> {
        let mut out: Vec<ScoreRecord> = self
            .history
            .iter()
            .enumerate()
            .flat_map(|(id, h)| h.iter().map(move |&(step, score)| ScoreRecord { id, step, score }))
            .collect();
        out.sort_by_key(|r| (r.step, r.id));
        out
    }
}

pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|&v| (v - lo) / range).collect()
}

#[inline]
pub fn clamp_unit(x: f64) -> f64 {
    x.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

pub fn read_score_stream<R: BufRead>(reader: R) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GraceError::Format(format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line)
            .map_err(|e| GraceError::Format(format!("score stream line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_score_stream<W: Write>(mut writer: W, records: &[ScoreRecord]) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut writer, rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Hyperparameters for selection, checking, and propagation.
///
/// Field names double as the JSON config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Weight of the representation term against the warped importance term.
    pub lambda_blend: f64,
    /// Coreset size per interval.
    pub budget_b: usize,
    /// Budget as a fraction, feeds the Beta shape.
    pub budget_eta: f64,
    /// Score-discrepancy trigger threshold.
    pub delta: f64,
    /// Embedding-shift trigger threshold.
    pub delta_h: f64,
    /// Training steps per interval.
    pub t_c: usize,
    pub k: usize,
    pub k_recal: usize,
    pub beta_const_c: f64,
    pub q_exp: f64,
    pub r_exp: f64,
    pub gamma_temp: f64,
    /// Affinity gate for propagation.
    pub beta_aff: f64,
    /// Decay inside the discrepancy check.
    pub lambda_c: f64,
    /// Candidate pool size drawn each interval.
    pub n_s: usize,
    /// Check-sample size; capped by the coreset size at use.
    pub n_s_check: usize,
    pub seed: u64,
    /// Divide warped scores by the Beta pdf's maximum so they land in `[0, 1]`.
    pub normalize_warp: bool,
    pub history_cap: Option<usize>,
    pub lsh_tables: usize,
    pub lsh_planes: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            lambda_blend: 0.5,
            budget_b: 32,
            budget_eta: 0.1,
            delta: 0.1,
            delta_h: 0.05,
            t_c: 10,
            k: 10,
            k_recal: 16,
            beta_const_c: 10.0,
            q_exp: 1.0,
            r_exp: 0.5,
            gamma_temp: 1.0,
            beta_aff: 0.5,
            lambda_c: 0.99,
            n_s: 128,
            n_s_check: 64,
            seed: 0,
            normalize_warp: true,
            history_cap: None,
            lsh_tables: 8,
            lsh_planes: 12,
        }
    }
}

impl SelectionConfig {
    /// Checks ranges and the cross-field constraints against a dataset of `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        let unit = |key: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(GraceError::config(key, format!("must be in [0, 1], got {v}")));
            }
            Ok(())
        };
        let nonneg = |key: &str, v: f64| -> Result<()> {
            if v.is_nan() || v < 0.0 {
                return Err(GraceError::config(key, format!("must be >= 0, got {v}")));
            }
            Ok(())
        };
        let positive = |key: &str, v: usize| -> Result<()> {
            if v == 0 {
                return Err(GraceError::config(key, "must be a positive integer"));
            }
            Ok(())
        };
        unit("lambda_blend", self.lambda_blend)?;
        positive("budget_b", self.budget_b)?;
        if !(self.budget_eta > 0.0 && self.budget_eta <= 1.0) {
            return Err(GraceError::config("budget_eta", format!("must be in (0, 1], got {}", self.budget_eta)));
        }
        nonneg("delta", self.delta)?;
        nonneg("delta_h", self.delta_h)?;
        positive("t_c", self.t_c)?;
        positive("k", self.k)?;
        positive("k_recal", self.k_recal)?;
        if !(self.beta_const_c > 2.0) || !self.beta_const_c.is_finite() {
            return Err(GraceError::config("beta_const_c", format!("must be finite and > 2, got {}", self.beta_const_c)));
        }
        if !self.q_exp.is_finite() {
            return Err(GraceError::config("q_exp", "must be finite"));
        }
        if !self.r_exp.is_finite() {
            return Err(GraceError::config("r_exp", "must be finite"));
        }
        nonneg("gamma_temp", self.gamma_temp)?;
        nonneg("beta_aff", self.beta_aff)?;
        if !(self.lambda_c > 0.0 && self.lambda_c < 1.0) {
            return Err(GraceError::config("lambda_c", format!("must be in (0, 1), got {}", self.lambda_c)));
        }
        positive("n_s", self.n_s)?;
        positive("n_s_check", self.n_s_check)?;
        positive("lsh_tables", self.lsh_tables)?;
        if self.lsh_planes == 0 || self.lsh_planes > 64 {
            return Err(GraceError::config("lsh_planes", "must be in [1, 64]"));
        }
        if self.budget_b > self.n_s {
            return Err(GraceError::config(
                "budget_b",
                format!("budget_b = {} exceeds n_s = {}", self.budget_b, self.n_s),
            ));
        }
        if self.n_s > n {
            return Err(GraceError::config("n_s", format!("n_s = {} exceeds dataset size {n}", self.n_s)));
        }
        if self.k_recal > n {
            return Err(GraceError::config("k_recal", format!("k_recal = {} exceeds dataset size {n}", self.k_recal)));
        }
        if self.k >= n {
            return Err(GraceError::config("k", format!("k must be < n (k = {}, n = {n})", self.k)));
        }
        Ok(())
    }
}
