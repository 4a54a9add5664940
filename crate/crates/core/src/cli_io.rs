// SPDX-License-Identifier: Apache-2.0

//! Command-line surface and file plumbing.
//!
//! Every output file is written to a temporary sibling and renamed into
//! place, so an interrupted command never leaves a truncated artifact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::dynamics::{check_and_update, GraphState, UpdateEvent};
use crate::error::{GraceError, Result};
use crate::knn_graph::MutualKnnGraph;
use crate::orchestrator::{run_baseline, RunReport, StepBudget, Strategy};
use crate::scoring::selection_scores;
use crate::selector::{select_coreset, CoresetEvent};
use crate::simulator::{SimConfig, SimState};
use crate::store::{read_score_stream, write_score_stream, EmbeddingTable, SampleId, ScoreLedger, SelectionConfig};

#[derive(Debug, Parser)]
#[command(name = "grace", version, about = "Graph-guided adaptive coreset selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the mutual k-NN graph of an embedding file.
    BuildGraph {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select a coreset from embeddings and a score stream.
    Select {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Selection config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the simulator and dump its embeddings and scores.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out_embeddings: PathBuf,
        #[arg(long)]
        out_scores: PathBuf,
    },
    /// Run one drift check and update against a replayed simulator.
    Check {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Coreset JSON as written by `select`.
        #[arg(long)]
        coreset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Graph JSONL; rebuilt from the embeddings when omitted.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a full training loop from a run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render a run report's loss curves as CSV.
    Report {
        #[arg(long)]
        report: PathBuf,
        /// Writes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Reproducible simulator state: config plus a seeded training schedule.
#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// Simulator config JSON; defaults apply when omitted.
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
    /// Training steps on random batches before the dump.
    #[arg(long, default_value_t = 0)]
    pub sim_steps: u64,
    #[arg(long, default_value_t = 64)]
    pub sim_batch: usize,
}

impl SimArgs {
    pub fn replay(&self) -> Result<SimState> {
        let cfg: SimConfig = match &self.sim_config {
            Some(p) => read_json_config(p)?,
            None => SimConfig::default(),
        };
        simulate(&cfg, self.sim_steps, self.sim_batch)
    }
}

/// `steps` SGD steps on uniformly drawn batches, seeded by the simulator seed.
pub fn simulate(cfg: &SimConfig, steps: u64, batch: usize) -> Result<SimState> {
    let mut sim = SimState::new(cfg)?;
    if steps > 0 && (batch == 0 || batch > cfg.n) {
        return Err(GraceError::config("sim_batch", format!("must be in [1, {}], got {batch}", cfg.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..steps {
        let mut ids: Vec<SampleId> = index::sample(&mut rng, cfg.n, batch).into_iter().map(SampleId).collect();
        ids.sort_unstable();
        sim.train_step(&ids)?;
    }
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub simulation: SimConfig,
    pub total_steps: u64,
    /// Defaults to 10% of `total_steps`.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_strategy() -> Strategy {
    Strategy::Grace
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("grace-out")
}

impl RunConfig {
    pub fn budget(&self) -> StepBudget {
        match self.warmup_steps {
            Some(w) => StepBudget {
                total_steps: self.total_steps,
                warmup_steps: w,
            },
            None => StepBudget::with_default_warmup(self.total_steps),
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraph { embeddings, k, out } => cmd_build_graph(&embeddings, k, &out),
        Command::Select {
            embeddings,
            scores,
            config,
            out,
        } => cmd_select(&embeddings, &scores, config.as_deref(), &out),
        Command::Simulate {
            sim,
            out_embeddings,
            out_scores,
        } => cmd_simulate(&sim, &out_embeddings, &out_scores),
        Command::Check {
            embeddings,
            scores,
            coreset,
            config,
            graph,
            sim,
            out_dir,
        } => cmd_check(&CheckInputs {
            embeddings: &embeddings,
            scores: &scores,
            coreset: &coreset,
            config: config.as_deref(),
            graph: graph.as_deref(),
            sim: &sim,
            out_dir: &out_dir,
        }),
        Command::Run { config, out_dir } => cmd_run(&config, out_dir.as_deref()).map(|_| ()),
        Command::Report { report, out } => cmd_report(&report, out.as_deref()),
    }
}

pub fn cmd_build_graph(embeddings: &Path, k: usize, out: &Path) -> Result<()> {
    let emb = read_embeddings(embeddings)?;
    let g = MutualKnnGraph::build(&emb, k)?;
    write_atomic(out, |w| g.write_jsonl(w))?;
    eprintln!("n={} k={} edges={}", emb.n(), k, g.edge_count());
    Ok(())
}

pub fn cmd_select(embeddings: &Path, scores: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let emb = read_embeddings(embeddings)?;
    let cfg = load_selection_config(config)?;
    cfg.validate(emb.n())?;
    let (ledger, step) = read_ledger(scores, emb.n())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool: Vec<SampleId> = index::sample(&mut rng, emb.n(), cfg.n_s).into_iter().map(SampleId).collect();
    pool.sort_unstable();
    let (_, warped) = selection_scores(&ledger, &cfg)?;
    let sel = select_coreset(&pool, cfg.budget_b, &emb, &warped, cfg.lambda_blend)?;
    let event = CoresetEvent::new(step, &sel);
    write_atomic(out, |w| write_json_line(w, &event))?;
    eprintln!("selected {} of {} candidates, objective {}", sel.members.len(), pool.len(), sel.objective_value);
    Ok(())
}

pub fn cmd_simulate(sim: &SimArgs, out_embeddings: &Path, out_scores: &Path) -> Result<()> {
    let state = sim.replay()?;
    let n = state.data().len();
    let ids: Vec<SampleId> = (0..n).map(SampleId).collect();
    let feats = crate::dynamics::FeatureProvider::extract_features(&state, &ids)?;
    let emb = EmbeddingTable::from_rows(feats.embeddings)?;
    let records: Vec<_> = feats
        .scores
        .iter()
        .enumerate()
        .map(|(id, &score)| crate::store::ScoreRecord {
            id,
            step: state.step(),
            score,
        })
        .collect();
    write_atomic(out_embeddings, |w| emb.write_to(w))?;
    write_atomic(out_scores, |w| write_score_stream(w, &records))?;
    eprintln!("simulated n={n} steps={} loss={}", state.step(), state.full_loss());
    Ok(())
}

pub struct CheckInputs<'a> {
    pub embeddings: &'a Path,
    pub scores: &'a Path,
    pub coreset: &'a Path,
    pub config: Option<&'a Path>,
    pub graph: Option<&'a Path>,
    pub sim: &'a SimArgs,
    pub out_dir: &'a Path,
}

/// Writes `event.jsonl`, `embeddings.grce`, `scores.jsonl`, `graph.jsonl`.
pub fn cmd_check(inputs: &CheckInputs<'_>) -> Result<()> {
    let emb = read_embeddings(inputs.embeddings)?;
    let cfg = load_selection_config(inputs.config)?;
    cfg.validate(emb.n())?;
    let (ledger, stream_step) = read_ledger(inputs.scores, emb.n())?;
    let core: CoresetEvent = read_json_file(inputs.coreset)?;
    let provider = inputs.sim.replay()?;
    // a provider replayed past the stream checks at its own step
    let step = stream_step.max(provider.step());
    if provider.data().len() != emb.n() {
        return Err(GraceError::config(
            "sim_config",
            format!("simulator has {} samples, embeddings have {}", provider.data().len(), emb.n()),
        ));
    }
    let mut state = GraphState::new(emb, ledger, &cfg)?;
    if let Some(path) = inputs.graph {
        let file = File::open(path).map_err(|e| GraceError::io(path, e))?;
        state.graph = MutualKnnGraph::read_jsonl(BufReader::new(file), cfg.k)?;
        if state.graph.n() != state.emb.n() {
            return Err(GraceError::Format(format!(
                "graph has {} nodes, embeddings have {}",
                state.graph.n(),
                state.emb.n()
            )));
        }
    }
    let members: Vec<SampleId> = core.members.iter().copied().map(SampleId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = check_and_update(&mut state, &members, &provider, &cfg, &mut rng, step)?;

    create_dir(inputs.out_dir)?;
    let event = plan.event();
    write_atomic(&inputs.out_dir.join("event.jsonl"), |w| write_json_line(w, &event))?;
    write_atomic(&inputs.out_dir.join("embeddings.grce"), |w| state.emb.write_to(w))?;
    write_atomic(&inputs.out_dir.join("scores.jsonl"), |w| {
        write_score_stream(w, &state.ledger.records())
    })?;
    write_atomic(&inputs.out_dir.join("graph.jsonl"), |w| state.graph.write_jsonl(w))?;
    eprintln!(
        "step {step}: delta_I {:?}, triggered {}, recal {}, graph repaired {}",
        event.delta_i,
        event.triggered,
        event.recal.len(),
        event.graph_repaired
    );
    Ok(())
}

/// Writes `report.json`, `events.jsonl` and `losses.csv` into the output directory.
pub fn cmd_run(config: &Path, out_dir: Option<&Path>) -> Result<RunReport> {
    let run: RunConfig = read_json_config(config)?;
    run.simulation.validate()?;
    run.selection.validate(run.simulation.n)?;
    let mut sim = SimState::new(&run.simulation)?;
    let report = run_baseline(run.strategy, &run.selection, &mut sim, run.budget())?;

    let dir = out_dir.unwrap_or(&run.output_dir);
    create_dir(dir)?;
    write_atomic(&dir.join("report.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        w.write_all(b"\n")
    })?;
    let events: Vec<&UpdateEvent> = report.checks().collect();
    write_atomic(&dir.join("events.jsonl"), |w| {
        events.iter().try_for_each(|e| write_json_line(&mut *w, e))
    })?;
    write_atomic(&dir.join("losses.csv"), |w| w.write_all(report.loss_csv().as_bytes()))?;
    eprintln!(
        "{}: {} steps, final loss {}, {} checks ({} triggered)",
        report.strategy.name(),
        report.train_steps,
        report.final_loss,
        events.len(),
        report.triggered_count()
    );
    Ok(report)
}

pub fn cmd_report(report: &Path, out: Option<&Path>) -> Result<()> {
    let parsed: RunReport = read_json_file(report)?;
    let csv = parsed.loss_csv();
    match out {
        Some(path) => write_atomic(path, |w| w.write_all(csv.as_bytes())),
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| GraceError::io("<stdout>", e)),
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| GraceError::io(path, e))?;
    EmbeddingTable::read_from(BufReader::new(file)).map_err(|e| match e {
        GraceError::Format(msg) => GraceError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Replays a score stream; the current step is the largest step seen.
pub fn read_ledger(path: &Path, n: usize) -> Result<(ScoreLedger, u64)> {
    let file = File::open(path).map_err(|e| GraceError::io(path, e))?;
    let records = read_score_stream(BufReader::new(file))?;
    if let Some(bad) = records.iter().find(|r| r.id >= n) {
        return Err(GraceError::Data {
            row: bad.id,
            col: 0,
            msg: format!("score for sample {} but only {n} embeddings", bad.id),
        });
    }
    let ledger = ScoreLedger::replay(n, &records)?;
    let step = records.iter().map(|r| r.step).max().unwrap_or(0);
    Ok((ledger, step))
}

fn load_selection_config(path: Option<&Path>) -> Result<SelectionConfig> {
    match path {
        Some(p) => read_json_config(p),
        None => Ok(SelectionConfig::default()),
    }
}

/// Parses a config file. Type errors and unknown keys become config errors
/// naming the key; malformed JSON is a format error.
pub fn read_json_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| GraceError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => GraceError::config(offending_key(&e.to_string()), e.to_string()),
            _ => GraceError::Format(format!("{}: {e}", path.display())),
        }
    })
}

fn offending_key(msg: &str) -> String {
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(key) = rest.split('`').next() {
                return key.to_string();
            }
        }
    }
    "config".to_string()
}

fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| GraceError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| GraceError::Format(format!("{}: {e}", path.display())))
}

fn write_json_line<W: Write, T: Serialize>(mut w: W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GraceError::io(dir, e))
}

/// Writes through a temporary file in the target's directory, then renames.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut NamedTempFile>) -> std::io::Result<()>,
{
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(parent).map_err(|e| GraceError::io(parent, e))?;
    {
        let mut w = BufWriter::new(&mut tmp);
        fill(&mut w).map_err(|e| GraceError::io(path, e))?;
        w.flush().map_err(|e| GraceError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| GraceError::io(path, e.error))?;
    Ok(())
}
