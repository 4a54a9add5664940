// SPDX-License-Identifier: Apache-2.0

//! The training loop: warm-up, feature extraction, graph build, then per
//! interval sample a candidate pool, select a coreset, train on it for `t_c`
//! steps and run the drift check. Baselines share the warm-up and the step
//! budget and only swap the selection rule.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{check_and_update, FeatureProvider, GraphState, UpdateEvent, UpdatePlan};
use crate::error::{GraceError, Result};
use crate::scoring::selection_scores;
use crate::selector::select_coreset;
use crate::simulator::SimState;
use crate::store::{EmbeddingTable, SampleId, ScoreLedger, SelectionConfig};

/// A feature provider whose parameters can be trained.
pub trait Trainer: FeatureProvider {
    /// One optimizer step on `batch`; returns the batch loss.
    fn train_step(&mut self, batch: &[SampleId]) -> Result<f64>;
    /// Mean loss over the full training set.
    fn full_loss(&self) -> f64;
}

impl Trainer for SimState {
    fn train_step(&mut self, batch: &[SampleId]) -> Result<f64> {
        SimState::train_step(self, batch)
    }

    fn full_loss(&self) -> f64 {
        SimState::full_loss(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Grace,
    /// One random subset of size `budget_b`, drawn once and reused.
    RandomStatic,
    /// A fresh random subset every interval.
    RandomFixedInterval,
    FullData,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Grace => "grace",
            Strategy::RandomStatic => "random-static",
            Strategy::RandomFixedInterval => "random-fixed-interval",
            Strategy::FullData => "full-data",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepBudget {
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl StepBudget {
    /// Warm-up takes 10% of the total.
    pub fn with_default_warmup(total_steps: u64) -> Self {
        StepBudget {
            total_steps,
            warmup_steps: total_steps / 10,
        }
    }

    fn validate(&self, t_c: usize) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(GraceError::config(
                "warmup_steps",
                format!("{} exceeds total_steps = {}", self.warmup_steps, self.total_steps),
            ));
        }
        if self.total_steps - self.warmup_steps < t_c as u64 {
            return Err(GraceError::config(
                "total_steps",
                format!(
                    "{} steps after a {}-step warm-up leave less than one interval (t_c = {t_c})",
                    self.total_steps, self.warmup_steps
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub index: usize,
    pub start_step: u64,
    pub end_step: u64,
    pub coreset: Vec<SampleId>,
    /// Selection objective; absent for baselines.
    pub objective: Option<f64>,
    /// Batch loss of each training step.
    pub losses: Vec<f64>,
    /// Full training-set loss after the interval.
    pub full_loss: f64,
    pub check: Option<UpdateEvent>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub warmup: Duration,
    pub extraction: Duration,
    pub graph_build: Duration,
    pub selection: Duration,
    pub training: Duration,
    pub checks: Duration,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub config: SelectionConfig,
    pub total_steps: u64,
    pub warmup_steps: u64,
    /// Optimizer steps actually taken; always equals `total_steps`.
    pub train_steps: u64,
    pub warmup_losses: Vec<f64>,
    pub intervals: Vec<IntervalRecord>,
    pub final_loss: f64,
    #[serde(skip)]
    pub timings: StageTimings,
    /// One entry per check that ran, triggered or not.
    #[serde(skip)]
    pub plans: Vec<UpdatePlan>,
}

impl RunReport {
    pub fn checks(&self) -> impl Iterator<Item = &UpdateEvent> {
        self.intervals.iter().filter_map(|r| r.check.as_ref())
    }

    pub fn triggered_count(&self) -> usize {
        self.checks().filter(|c| c.triggered).count()
    }

    pub fn skipped_count(&self) -> usize {
        self.checks().filter(|c| !c.triggered).count()
    }

    /// `phase,step,batch_loss,full_loss`, one row per training step; the full
    /// loss is filled on the last step of each interval.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("phase,step,batch_loss,full_loss\n");
        for (i, loss) in self.warmup_losses.iter().enumerate() {
            let _ = writeln!(out, "warmup,{},{loss},", i + 1);
        }
        for r in &self.intervals {
            for (i, loss) in r.losses.iter().enumerate() {
                let step = r.start_step + i as u64 + 1;
                if step == r.end_step {
                    let _ = writeln!(out, "interval,{step},{loss},{}", r.full_loss);
                } else {
                    let _ = writeln!(out, "interval,{step},{loss},");
                }
            }
        }
        out
    }
}

/// Called after every check with the state before it, the plan, and the
/// state after it.
pub type CheckObserver<'a> = dyn FnMut(&GraphState, &UpdatePlan, &GraphState) + 'a;

pub fn run_grace<P: Trainer + ?Sized>(cfg: &SelectionConfig, provider: &mut P, budget: StepBudget) -> Result<RunReport> {
    run_grace_observed(cfg, provider, budget, None)
}

pub fn run_grace_observed<P: Trainer + ?Sized>(
    cfg: &SelectionConfig,
    provider: &mut P,
    budget: StepBudget,
    mut observer: Option<&mut CheckObserver<'_>>,
) -> Result<RunReport> {
    let n = provider.num_samples();
    cfg.validate(n)?;
    budget.validate(cfg.t_c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let warmup_losses = warm_up(provider, &mut rng, n, cfg.budget_b, budget.warmup_steps)?;
    timings.warmup = clock.elapsed();

    let clock = Instant::now();
    let start = budget.warmup_steps;
    let all: Vec<SampleId> = (0..n).map(SampleId).collect();
    let feats = provider.extract_features(&all)?;
    let emb = EmbeddingTable::from_rows(feats.embeddings)?;
    let mut ledger = ScoreLedger::new(n).with_history_cap(cfg.history_cap);
    for (&id, &s) in all.iter().zip(&feats.scores) {
        ledger.record_score(id, start, s)?;
        ledger.mark_accurate(id, start)?;
    }
    timings.extraction = clock.elapsed();

    let clock = Instant::now();
    let mut state = GraphState::new(emb, ledger, cfg)?;
    timings.graph_build = clock.elapsed();

    let mut intervals = Vec::new();
    let mut plans = Vec::new();
    let mut step = start;
    while step < budget.total_steps {
        let len = (budget.total_steps - step).min(cfg.t_c as u64);

        let clock = Instant::now();
        let mut pool: Vec<SampleId> = index::sample(&mut rng, n, cfg.n_s).into_iter().map(SampleId).collect();
        pool.sort_unstable();
        let (_, warped) = selection_scores(&state.ledger, cfg)?;
        let selection = select_coreset(&pool, cfg.budget_b, &state.emb, &warped, cfg.lambda_blend)?;
        let mut core = selection.members.clone();
        core.sort_unstable();
        timings.selection += clock.elapsed();

        let clock = Instant::now();
        let start_step = step;
        let mut losses = Vec::with_capacity(len as usize);
        for _ in 0..len {
            losses.push(provider.train_step(&core)?);
            step += 1;
            // Training sees these samples' outputs anyway; their scores are cached as exact.
            let seen = provider.extract_features(&core)?;
            for (&id, &s) in core.iter().zip(&seen.scores) {
                state.ledger.record_score(id, step, s)?;
                state.ledger.mark_accurate(id, step)?;
            }
        }
        timings.training += clock.elapsed();

        let check = if len == cfg.t_c as u64 {
            let clock = Instant::now();
            let before = observer.as_ref().map(|_| state.clone());
            let plan = check_and_update(&mut state, &core, &*provider, cfg, &mut rng, step)?;
            if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
                obs(before, &plan, &state);
            }
            let event = plan.event();
            log::debug!(
                "step {step}: delta_I {:?}, triggered {}, recal {}",
                event.delta_i,
                event.triggered,
                event.recal.len()
            );
            plans.push(plan);
            timings.checks += clock.elapsed();
            Some(event)
        } else {
            None
        };

        intervals.push(IntervalRecord {
            index: intervals.len(),
            start_step,
            end_step: step,
            coreset: core,
            objective: Some(selection.objective_value),
            losses,
            full_loss: provider.full_loss(),
            check,
        });
    }

    let report = RunReport {
        strategy: Strategy::Grace,
        seed: cfg.seed,
        config: cfg.clone(),
        total_steps: budget.total_steps,
        warmup_steps: budget.warmup_steps,
        train_steps: step,
        warmup_losses,
        intervals,
        final_loss: provider.full_loss(),
        timings,
        plans,
    };
    log_timings(&report);
    Ok(report)
}

pub fn run_baseline<P: Trainer + ?Sized>(
    strategy: Strategy,
    cfg: &SelectionConfig,
    provider: &mut P,
    budget: StepBudget,
) -> Result<RunReport> {
    if strategy == Strategy::Grace {
        return run_grace(cfg, provider, budget);
    }
    let n = provider.num_samples();
    cfg.validate(n)?;
    budget.validate(cfg.t_c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let warmup_losses = warm_up(provider, &mut rng, n, cfg.budget_b, budget.warmup_steps)?;
    timings.warmup = clock.elapsed();

    let mut fixed: Option<Vec<SampleId>> = None;
    let mut intervals = Vec::new();
    let mut step = budget.warmup_steps;
    while step < budget.total_steps {
        let len = (budget.total_steps - step).min(cfg.t_c as u64);
        let clock = Instant::now();
        let core = match strategy {
            Strategy::FullData => (0..n).map(SampleId).collect(),
            Strategy::RandomStatic => fixed.get_or_insert_with(|| random_batch(&mut rng, n, cfg.budget_b)).clone(),
            _ => random_batch(&mut rng, n, cfg.budget_b),
        };
        timings.selection += clock.elapsed();

        let clock = Instant::now();
        let start_step = step;
        let mut losses = Vec::with_capacity(len as usize);
        for _ in 0..len {
            losses.push(provider.train_step(&core)?);
            step += 1;
        }
        timings.training += clock.elapsed();
        intervals.push(IntervalRecord {
            index: intervals.len(),
            start_step,
            end_step: step,
            coreset: core,
            objective: None,
            losses,
            full_loss: provider.full_loss(),
            check: None,
        });
    }

    let report = RunReport {
        strategy,
        seed: cfg.seed,
        config: cfg.clone(),
        total_steps: budget.total_steps,
        warmup_steps: budget.warmup_steps,
        train_steps: step,
        warmup_losses,
        intervals,
        final_loss: provider.full_loss(),
        timings,
        plans: Vec::new(),
    };
    log_timings(&report);
    Ok(report)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<SampleId> {
    let mut batch: Vec<SampleId> = index::sample(rng, n, size).into_iter().map(SampleId).collect();
    batch.sort_unstable();
    batch
}

fn warm_up<P: Trainer + ?Sized>(provider: &mut P, rng: &mut ChaCha8Rng, n: usize, size: usize, steps: u64) -> Result<Vec<f64>> {
    (0..steps)
        .map(|_| {
            let batch = random_batch(rng, n, size);
            provider.train_step(&batch)
        })
        .collect()
}

fn log_timings(report: &RunReport) {
    let t = &report.timings;
    log::info!(
        "{}: warmup {:?}, extraction {:?}, graph {:?}, selection {:?}, training {:?}, checks {:?}",
        report.strategy.name(),
        t.warmup,
        t.extraction,
        t.graph_build,
        t.selection,
        t.training,
        t.checks
    );
}
