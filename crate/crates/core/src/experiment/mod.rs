//! Batch runner: one trace and one summary per (cell, seed), then an
//! aggregate table per cell.

mod config;

pub use config::{parse_config, validate_config, CellPlan, ConfigErrors, ExperimentPlan, InitKind, Mode, TaskSpec, PRESETS};

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::gen_synthetic;
use crate::model::Predictor;
use crate::problem::{FitOptions, Problem};
use crate::random::Rng;
use crate::theory::{self, BoundReport, CloudOptions, ConstantEstimates};
use crate::trainers::{self, read_records, Scheme, TrainError, TrainTrace, STAGE_ORIGINAL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

const RUNS_DIR: &str = "runs";
const AGGREGATE_FILE: &str = "aggregate.csv";
/// Stream for the init draw and the constant-estimation perturbations.
const STREAM_AUX: u64 = 0xa0c;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub jobs: usize,
    pub seed_offset: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, seed_offset: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cell: String,
    pub scheme: String,
    pub seed: u64,
    pub delta: f64,
    pub status: RunStatus,
    pub message: Option<String>,
    pub iterations: usize,
    pub initial_gap: f64,
    pub final_gap: f64,
    #[serde(rename = "L_floor")]
    pub l_floor: f64,
    #[serde(rename = "Ltilde_floor")]
    pub ltilde_floor: f64,
    pub wall_time_s: f64,
    pub resolved: BTreeMap<String, f64>,
    pub constants: Option<ConstantEstimates>,
    pub bounds: Option<BoundReport>,
    /// Radius of the constraint set Stage-II iterates are checked against.
    pub membership_gamma: Option<f64>,
    /// Fraction of Stage-II iterates inside that set.
    pub membership_rate: Option<f64>,
    pub trace_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub cell: String,
    pub scheme: String,
    pub delta: f64,
    pub runs: usize,
    pub diverged: usize,
    pub median_final_gap: f64,
    pub mean_final_gap: f64,
    pub std_final_gap: f64,
    pub median_initial_gap: f64,
}

#[derive(Debug)]
pub enum PlanError {
    Config(ConfigErrors),
    Io(io::Error),
}

impl std::fmt::Display for PlanError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlanError::Config(e) => write!(f, "invalid configuration:\n{e}"),
            PlanError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for PlanError {}

impl From<io::Error> for PlanError {
    fn from(e: io::Error) -> Self {
        PlanError::Io(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub runs: Vec<RunSummary>,
    pub aggregate: Vec<AggregateRow>,
}

impl PlanOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.runs.iter().all(|r| r.status == RunStatus::Ok) {
            EXIT_OK
        } else {
            EXIT_DIVERGED
        }
    }
}

fn run_stem(cell: &str, seed: u64) -> String {
    let safe: String = cell
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}__seed{seed}")
}

/// Fails early when the output directory cannot be created or written.
fn prepare_output(dir: &Path) -> io::Result<PathBuf> {
    let runs = dir.join(RUNS_DIR);
    fs::create_dir_all(&runs)?;
    let probe = runs.join(".write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(runs)
}

fn build_problem(plan: &ExperimentPlan, delta: f64, seed: u64) -> crate::Result<Problem> {
    let task = gen_synthetic(&plan.task.config(delta), &Rng::new(seed))?;
    Problem::from_task(&task, plan.task.arch, plan.task.source, FitOptions::default())
}

fn initial_model(cell: &CellPlan, problem: &Problem, seed: u64) -> Predictor {
    match cell.init {
        InitKind::Zeros => problem.arch.zeros(),
        InitKind::Random { scale } => problem.arch.random(scale, &mut Rng::with_stream(seed, STREAM_AUX)),
    }
}

/// Applies theory-mode step and batch sizes; iteration counts stay as
/// configured.
fn resolve_theory(plan: &ExperimentPlan, problem: &Problem, init: &Predictor, cfg: &mut trainers::TrainConfig) -> crate::Result<()> {
    let mut rng = Rng::with_stream(cfg.seed, STREAM_AUX + 1);
    let cloud = theory::pilot_cloud(problem, init, 48, 0.1, &mut rng);
    let mut consts = theory::estimate_constants(problem, &cloud, None, CloudOptions::default(), &mut rng)?;
    // the start is the first pilot point; keep its gaps exact
    consts.initial_gap = problem.gap(init);
    let lambda = cfg.scheme.mix().map(|m| m.lambda);
    let sched = theory::theory_stepsizes(&consts, &cfg.scheme, problem.train.len(), lambda, plan.failure_prob)?;
    let get = |k: &str| sched.get(k);
    match &mut cfg.scheme {
        Scheme::Original { .. } => cfg.stage1.lr = get("eta").unwrap_or(cfg.stage1.lr),
        Scheme::Augmented { .. } => {
            cfg.stage1.lr = get("eta").unwrap_or(cfg.stage1.lr);
            cfg.aug_batch = get("m0").map_or(cfg.aug_batch, |m| m as usize);
        }
        Scheme::AugDrop { .. } => {
            cfg.stage1.lr = get("eta1").unwrap_or(cfg.stage1.lr);
            cfg.stage2.lr = get("eta2").unwrap_or(cfg.stage2.lr);
            cfg.aug_batch = get("m1").map_or(cfg.aug_batch, |m| m as usize);
            cfg.batch = get("m2").map_or(cfg.batch, |m| m as usize);
        }
        Scheme::MixLoss { mix, .. } => {
            cfg.stage1.lr = get("eta").unwrap_or(cfg.stage1.lr);
            mix.m0 = get("m0").map_or(mix.m0, |m| m as usize);
        }
        Scheme::WeMix { mix, .. } => {
            cfg.stage1.lr = get("eta").unwrap_or(cfg.stage1.lr);
            cfg.stage2.lr = get("eta2").unwrap_or(cfg.stage2.lr);
            mix.m0 = get("m0").map_or(mix.m0, |m| m as usize);
            cfg.batch = get("m2").map_or(cfg.batch, |m| m as usize);
        }
    }
    cfg.resolved.extend(sched.values);
    cfg.resolved.insert("warnings".into(), sched.warnings.len() as f64);
    Ok(())
}

/// Constants over the run's own iterates, the bound report, and the
/// Stage-II membership rate against `8γ̂₀` (or `4γ̂₁`).
fn analyse(problem: &Problem, trace: &TrainTrace, scheme: &Scheme, seed: u64) -> crate::Result<(ConstantEstimates, BoundReport, Option<(f64, f64)>)> {
    let mut cloud: Vec<Vec<f64>> = trace.snapshots.iter().map(|(_, w)| w.clone()).collect();
    cloud.push(trace.final_params.clone());
    let mut rng = Rng::with_stream(seed, STREAM_AUX + 2);
    let opts = CloudOptions {
        perturbations: 32,
        ..CloudOptions::default()
    };
    let mut c = theory::estimate_constants(problem, &cloud, None, opts, &mut rng)?;
    // every visited iterate is in the trace, so μ̂ uses all of them
    c.mu = theory::estimate_mu_from_records(&trace.records, problem.l_floor)?;
    let stage2: Vec<_> = trace.stage_records(STAGE_ORIGINAL).collect();
    let two_stage = matches!(scheme, Scheme::AugDrop { .. } | Scheme::WeMix { .. });
    c.mu_restricted = if two_stage && !stage2.is_empty() {
        theory::estimate_mu_from_records(stage2.iter().copied(), problem.l_floor).unwrap_or(c.mu)
    } else {
        c.mu
    };
    c.initial_gap = trace.initial_gap().max(0.0);
    let report = theory::bound_report(&c, trace, scheme);
    let membership = if two_stage && !stage2.is_empty() && c.mu > 0.0 {
        let gamma = match c.delta_p {
            Some(dp) => 4.0 * theory::gamma1(dp, c.g, c.mu)?,
            None => 8.0 * theory::gamma0(c.delta_y, c.g, c.mu)?,
        };
        let inside = stage2.iter().filter(|r| r.constraint <= gamma).count();
        Some((gamma, inside as f64 / stage2.len() as f64))
    } else {
        None
    };
    Ok((c, report, membership))
}

fn execute(plan: &ExperimentPlan, cell: &CellPlan, problem: &crate::Result<Problem>, seed: u64, runs_dir: &Path) -> io::Result<RunSummary> {
    let stem = run_stem(&cell.name, seed);
    let trace_path = runs_dir.join(format!("{stem}.csv"));
    let started = Instant::now();
    let mut summary = RunSummary {
        cell: cell.name.clone(),
        scheme: cell.config.scheme.name().to_string(),
        seed,
        delta: cell.delta,
        status: RunStatus::Failed,
        message: None,
        iterations: 0,
        initial_gap: f64::NAN,
        final_gap: f64::NAN,
        l_floor: f64::NAN,
        ltilde_floor: f64::NAN,
        wall_time_s: 0.0,
        resolved: BTreeMap::new(),
        constants: None,
        bounds: None,
        membership_gamma: None,
        membership_rate: None,
        trace_file: format!("{stem}.csv"),
    };
    let problem = match problem {
        Ok(p) => p,
        Err(e) => {
            summary.message = Some(format!("task: {e}"));
            return write_summary(runs_dir, &stem, summary);
        }
    };
    summary.l_floor = problem.l_floor;
    summary.ltilde_floor = problem.ltilde_floor;
    let init = initial_model(cell, problem, seed);
    let mut cfg = cell.config.clone();
    cfg.seed = seed;
    cfg.snapshot_every = (cfg.scheme.total_iters() / 24).max(1);
    if plan.mode == Mode::Theory {
        if let Err(e) = resolve_theory(plan, problem, &init, &mut cfg) {
            summary.message = Some(format!("theory constants: {e}"));
            return write_summary(runs_dir, &stem, summary);
        }
    }
    let result = trainers::train(&init, problem, &cfg);
    let trace = match result {
        Ok(t) => {
            summary.status = RunStatus::Ok;
            t
        }
        Err(TrainError::Diverged { iteration, trace }) => {
            summary.status = RunStatus::Diverged;
            summary.message = Some(format!("diverged at iteration {iteration}"));
            *trace
        }
        Err(TrainError::Invalid(e)) => {
            summary.message = Some(e.to_string());
            return write_summary(runs_dir, &stem, summary);
        }
    };
    trace
        .write_csv(fs::File::create(&trace_path)?)
        .map_err(|e| io::Error::other(e.to_string()))?;
    summary.iterations = trace.iterations();
    summary.initial_gap = trace.initial_gap();
    summary.final_gap = trace.final_gap();
    summary.resolved = cfg.resolved.clone();
    if summary.status == RunStatus::Ok {
        match analyse(problem, &trace, &cfg.scheme, seed) {
            Ok((c, b, m)) => {
                summary.constants = Some(c);
                summary.bounds = Some(b);
                summary.membership_gamma = m.map(|x| x.0);
                summary.membership_rate = m.map(|x| x.1);
            }
            Err(e) => log::warn!("{stem}: constants not estimated: {e}"),
        }
    }
    summary.wall_time_s = started.elapsed().as_secs_f64();
    write_summary(runs_dir, &stem, summary)
}

fn write_summary(runs_dir: &Path, stem: &str, summary: RunSummary) -> io::Result<RunSummary> {
    let json = serde_json::to_string_pretty(&summary).map_err(io::Error::other)?;
    fs::write(runs_dir.join(format!("{stem}.json")), json)?;
    Ok(summary)
}

/// Runs every (cell, seed) pair and writes traces, summaries and the
/// aggregate table. Individual divergences are recorded, not fatal.
pub fn run_plan(plan: &ExperimentPlan, opts: RunOptions) -> Result<PlanOutcome, PlanError> {
    let runs_dir = prepare_output(&plan.output_dir)?;
    let seeds: Vec<u64> = plan.seeds.iter().map(|s| s + opts.seed_offset).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(io::Error::other)?;
    let mut keys: Vec<(u64, u64)> = plan
        .cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c.delta.to_bits(), s)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let runs = pool.install(|| -> io::Result<Vec<RunSummary>> {
        let problems: BTreeMap<(u64, u64), crate::Result<Problem>> = keys
            .par_iter()
            .map(|&(d, s)| ((d, s), build_problem(plan, f64::from_bits(d), s)))
            .collect();
        let jobs: Vec<(&CellPlan, u64)> = plan.cells.iter().flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
        jobs.par_iter()
            .map(|&(cell, seed)| execute(plan, cell, &problems[&(cell.delta.to_bits(), seed)], seed, &runs_dir))
            .collect()
    })?;
    let aggregate = aggregate(&runs);
    write_aggregate(&plan.output_dir.join(AGGREGATE_FILE), &aggregate)?;
    Ok(PlanOutcome { runs, aggregate })
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Per-cell statistics over the runs that finished; cells keep the order in
/// which they first appear.
pub fn aggregate(runs: &[RunSummary]) -> Vec<AggregateRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.cell.as_str()) {
            order.push(&r.cell);
        }
    }
    order
        .into_iter()
        .map(|cell| {
            let rs: Vec<&RunSummary> = runs.iter().filter(|r| r.cell == cell).collect();
            let ok: Vec<&&RunSummary> = rs.iter().filter(|r| r.status == RunStatus::Ok).collect();
            let mut gaps: Vec<f64> = ok.iter().map(|r| r.final_gap).collect();
            gaps.sort_by(f64::total_cmp);
            let mut init: Vec<f64> = ok.iter().map(|r| r.initial_gap).collect();
            init.sort_by(f64::total_cmp);
            let n = gaps.len() as f64;
            let mean = gaps.iter().sum::<f64>() / n;
            let std = if gaps.len() > 1 {
                (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                cell: cell.to_string(),
                scheme: rs[0].scheme.clone(),
                delta: rs[0].delta,
                runs: rs.len(),
                diverged: rs.iter().filter(|r| r.status != RunStatus::Ok).count(),
                median_final_gap: median(&gaps),
                mean_final_gap: mean,
                std_final_gap: std,
                median_initial_gap: median(&init),
            }
        })
        .collect()
}

fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io::Error::other)?;
    for r in rows {
        w.serialize(r).map_err(io::Error::other)?;
    }
    w.flush()
}

pub fn read_aggregate(path: &Path) -> io::Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path).map_err(io::Error::other)?;
    r.deserialize().map(|row| row.map_err(io::Error::other)).collect()
}

/// Rebuilds the aggregate table of an output directory from the individual
/// summaries, taking every gap from the trace files themselves, and
/// rewrites `aggregate.csv`.
pub fn report(dir: &Path) -> io::Result<Vec<AggregateRow>> {
    let runs_dir = dir.join(RUNS_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut runs = Vec::with_capacity(paths.len());
    for p in paths {
        let mut s: RunSummary = serde_json::from_str(&fs::read_to_string(&p)?).map_err(io::Error::other)?;
        let trace = runs_dir.join(&s.trace_file);
        if trace.exists() {
            let records = read_records(fs::File::open(&trace)?).map_err(|e| io::Error::other(e.to_string()))?;
            if let (Some(first), Some(last)) = (records.first(), records.last()) {
                s.initial_gap = first.l - s.l_floor;
                s.final_gap = last.l - s.l_floor;
            }
        }
        runs.push(s);
    }
    // summaries are read in file order; restore the plan's cell order where known
    if let Ok(previous) = read_aggregate(&dir.join(AGGREGATE_FILE)) {
        let rank = |c: &str| previous.iter().position(|r| r.cell == c).unwrap_or(usize::MAX);
        runs.sort_by_key(|r| (rank(&r.cell), r.seed));
    }
    let rows = aggregate(&runs);
    write_aggregate(&dir.join(AGGREGATE_FILE), &rows)?;
    Ok(rows)
}

/// Fixed-width text rendering of an aggregate table.
pub fn format_table(rows: &[AggregateRow]) -> String {
    let mut out = format!(
        "{:<20} {:<10} {:>8} {:>5} {:>4} {:>12} {:>12} {:>12}\n",
        "cell", "scheme", "delta", "runs", "div", "median gap", "mean gap", "std"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:<10} {:>8.4} {:>5} {:>4} {:>12.6} {:>12.6} {:>12.6}\n",
            r.cell, r.scheme, r.delta, r.runs, r.diverged, r.median_final_gap, r.mean_final_gap, r.std_final_gap
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path, iters: usize) -> ExperimentPlan {
        let text = format!(
            r#"
output_dir = "{}"
seeds = [3]
[task]
delta = 0.3
dim = 3
classes = 3
n_train = 50
n_aug = 100
n_eval = 100
[defaults]
iters = {iters}
batch = 8
aug_batch = 8
[[cell]]
scheme = "wemix"
"#,
            dir.display()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn zero_iterations_aggregate_is_the_initial_gap() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_plan(&tiny(dir.path(), 0), RunOptions::default()).unwrap();
        assert_eq!(out.exit_code(), EXIT_OK);
        assert_eq!(out.aggregate.len(), 1);
        assert_eq!(out.aggregate[0].median_final_gap, out.runs[0].initial_gap);
    }

    #[test]
    fn report_matches_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_plan(&tiny(dir.path(), 30), RunOptions::default()).unwrap();
        let again = report(dir.path()).unwrap();
        assert_eq!(again.len(), 1);
        assert!((again[0].median_final_gap - out.aggregate[0].median_final_gap).abs() <= 1e-12);
        assert!(out.runs[0].bounds.is_some());
        let on_disk = read_aggregate(&dir.path().join(AGGREGATE_FILE)).unwrap();
        assert_eq!(on_disk[0].runs, 1);
    }

    #[test]
    fn unwritable_output_fails_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        let plan = tiny(&file, 10);
        assert!(matches!(run_plan(&plan, RunOptions::default()), Err(PlanError::Io(_))));
    }
}
