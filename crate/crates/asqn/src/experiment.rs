//! Experiment orchestration: build the problem, run every (algorithm,
//! sweep point, repetition), write one trace per run and a summary.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use asqn_core::model::{Dataset, MatrixFactorizationModel, Model, Rating};
use asqn_core::rng::{fill_standard_normal, stream};
use asqn_core::sampler::ParameterState;
use asqn_core::simulator::{run_async, run_sync_mb, time_to_epsilon, Probe, StopTarget, Trace, TraceRecord};
use serde::Serialize;
use thiserror::Error;

use crate::config::{Algorithm, ConfigError, ExperimentConfig, Mode, ProblemConfig};
use crate::movielens::{load_movielens, IngestError, RatingsFormat};
use crate::runtime::{run, RunConfig, RunProbe};
use crate::synth::{synth_factorization, synth_linear_gaussian, LinearGaussianInstance};
use crate::trace::write_trace;

/// Caps the worker threads of real runs.
pub const THREADS_ENV: &str = "ASQN_THREADS";

/// Offset separating the initial-state stream from the worker streams.
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loading ratings: {0}")]
    Ingest(#[from] IngestError),
    #[error("{context}: {source}")]
    Numeric { context: String, source: asqn_core::Error },
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

impl ExperimentError {
    /// 1 for configuration problems, 2 for numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Numeric { source: asqn_core::Error::Divergence { .. }, .. } => 2,
            _ => 1,
        }
    }
}

fn numeric(context: impl Into<String>) -> impl FnOnce(asqn_core::Error) -> ExperimentError {
    let context = context.into();
    move |source| ExperimentError::Numeric { context, source }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> ExperimentError {
    let context = context.into();
    move |source| ExperimentError::Io { context, source }
}

/// A materialized problem instance.
pub enum Problem {
    Linear(LinearGaussianInstance),
    Factorization { model: MatrixFactorizationModel, data: Dataset<Rating> },
}

impl Problem {
    pub fn records(&self) -> usize {
        match self {
            Problem::Linear(p) => p.data.len(),
            Problem::Factorization { data, .. } => data.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Linear(p) => p.model.dim(),
            Problem::Factorization { model, .. } => model.dim(),
        }
    }

    /// `U*` when it is known in closed form.
    pub fn optimum(&self) -> Option<f64> {
        match self {
            Problem::Linear(p) => Some(p.optimum),
            Problem::Factorization { .. } => None,
        }
    }
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem, ExperimentError> {
    Ok(match &cfg.problem {
        ProblemConfig::LinearGaussian { seed, dim, records, noise_variance, correlation } => Problem::Linear(
            synth_linear_gaussian(*seed, *dim, *records, *noise_variance, *correlation).map_err(numeric("building problem"))?,
        ),
        ProblemConfig::SyntheticFactorization { seed, rows, cols, true_rank, rank, noise_std, observed } => {
            let inst = synth_factorization(*seed, *rows, *cols, *true_rank, *rank, *noise_std, *observed)
                .map_err(numeric("building problem"))?;
            Problem::Factorization { model: inst.model, data: inst.data }
        }
        ProblemConfig::Movielens { path, format, rank, cap, seed } => {
            let format = format.unwrap_or_else(|| RatingsFormat::from_path(path));
            let m = load_movielens(path, format, *rank, *cap, *seed)?;
            Problem::Factorization { model: m.model, data: m.data }
        }
    })
}

/// Initial state of repetition seed `seed`.
pub fn initial_state(dim: usize, scale: f64, seed: u64) -> ParameterState {
    let mut theta = vec![0.0; dim];
    if scale > 0.0 {
        fill_standard_normal(&mut stream(seed ^ INIT_STREAM), &mut theta);
        theta.iter_mut().for_each(|x| *x *= scale);
    }
    ParameterState::at_rest(theta).expect("finite initial state")
}

/// Where one run sits in the experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub algorithm: Algorithm,
    pub worker_time_std: f64,
    pub workers: usize,
}

/// Result of one repetition.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub records: Vec<TraceRecord>,
    pub iterations: u64,
    /// Virtual time (simulate) or wall-clock seconds (run).
    pub end_time: f64,
    pub max_staleness: u64,
    pub truncated: bool,
    /// One-line JSON report of a real run.
    pub report_line: Option<String>,
}

fn rmse_of(model: &MatrixFactorizationModel, data: &Dataset<Rating>, theta: &[f64]) -> f64 {
    model.rmse(data.records(), theta).unwrap_or(f64::NAN)
}

fn from_trace(t: Trace) -> RepOutcome {
    RepOutcome {
        iterations: t.applied(),
        end_time: t.end_time,
        max_staleness: t.max_staleness(),
        truncated: t.truncated,
        records: t.records,
        report_line: None,
    }
}

/// Runs a single repetition of `point` with seed `seed`.
pub fn run_point(cfg: &ExperimentConfig, problem: &Problem, point: Point, seed: u64) -> Result<RepOutcome, ExperimentError> {
    let target = match (cfg.target, problem.optimum()) {
        (Some(t), Some(optimum)) if t.stop_early => Some(StopTarget { optimum, epsilon: t.epsilon }),
        _ => None,
    };
    let init = initial_state(problem.dim(), cfg.init_scale, seed);
    let context = format!("{} (seed {seed})", point.algorithm);
    match problem {
        Problem::Linear(p) => dispatch(cfg, point, seed, init, &p.model, &p.data, target, None, &context),
        Problem::Factorization { model, data } => {
            let rmse = |theta: &[f64]| rmse_of(model, data, theta);
            dispatch(cfg, point, seed, init, model, data, target, Some(&rmse), &context)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dispatch<M>(
    cfg: &ExperimentConfig,
    point: Point,
    seed: u64,
    init: ParameterState,
    model: &M,
    data: &Dataset<M::Record>,
    target: Option<StopTarget>,
    secondary: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
    context: &str,
) -> Result<RepOutcome, ExperimentError>
where
    M: Model + Sync,
    M::Record: Sync,
{
    let records = data.len();
    match cfg.mode {
        Mode::Simulate => {
            let mut sim = cfg.simulator.sim_config(point.algorithm, seed);
            sim.worker_time_std = point.worker_time_std;
            sim.workers = point.workers;
            let probe = Probe { target, secondary: secondary.map(|f| f as &dyn Fn(&[f64]) -> f64) };
            let trace = match cfg.async_rule(point.algorithm, records) {
                Some(rule) => run_async(&sim, &rule, init, model, data, probe),
                None => run_sync_mb(&sim, &cfg.mb_config(records), init, model, data, probe),
            }
            .map_err(numeric(context))?;
            Ok(from_trace(trace))
        }
        Mode::Run => {
            let rule = cfg
                .async_rule(point.algorithm, records)
                .ok_or_else(|| ConfigError { path: Some("algorithms".into()), line: None, message: "not available in run mode".into() })?;
            let rc = RunConfig {
                workers: point.workers,
                max_iterations: cfg.runtime.max_iterations,
                max_wall: cfg.runtime.max_wall_ms.map(Duration::from_millis),
                record_every: cfg.runtime.record_every,
                staleness_bound: cfg.runtime.staleness_bound,
                seed,
                audit: false,
            };
            let report = run(&rc, &rule, init, model, data, RunProbe { target, secondary }).map_err(numeric(context))?;
            if let Some(e) = report.error {
                return Err(numeric(context)(e));
            }
            let truncated = match target {
                Some(t) => !report.trace.iter().any(|r| t.reached(r.potential)),
                None => report.iterations < rc.max_iterations,
            };
            Ok(RepOutcome {
                report_line: Some(report.summary_line()),
                iterations: report.iterations,
                end_time: report.wall.as_secs_f64(),
                max_staleness: report.max_staleness,
                truncated,
                records: report.trace,
            })
        }
    }
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for n = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn stats(values: &[f64]) -> Option<Stats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some(Stats { mean, std: var.sqrt(), count: values.len() })
}

#[derive(Debug, Clone, Serialize)]
pub struct RepSummary {
    pub rep: usize,
    pub seed: u64,
    pub file: String,
    pub iterations: u64,
    pub end_time: f64,
    pub max_staleness: u64,
    pub truncated: bool,
    pub final_potential: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_rmse: Option<f64>,
    pub time_to_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointSummary {
    pub algorithm: Algorithm,
    pub param: &'static str,
    pub value: f64,
    pub worker_time_std: f64,
    pub workers: usize,
    pub reps: Vec<RepSummary>,
    /// Over repetitions that reached the target.
    pub time_to_epsilon: Option<Stats>,
    pub reached: usize,
    pub final_potential: Option<Stats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_rmse: Option<Stats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedupRow {
    pub algorithm: Algorithm,
    pub workers: usize,
    pub mean_time: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mode: Mode,
    pub base_seed: u64,
    pub records: usize,
    pub dim: usize,
    pub optimum: Option<f64>,
    pub epsilon: Option<f64>,
    /// `U* = 0`: ε was applied as an absolute gap.
    pub absolute_epsilon: bool,
    pub points: Vec<PointSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub speedup: Vec<SpeedupRow>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub files: Vec<PathBuf>,
    pub summary_path: PathBuf,
    pub summary: Summary,
    pub report_lines: Vec<String>,
}

/// `algo_param-value_rep-k.csv`
pub fn trace_file_name(algo: Algorithm, param: &str, value: f64, rep: usize) -> String {
    format!("{}_{param}-{value}_rep-{rep}.csv", algo.name())
}

fn sweep_points(cfg: &ExperimentConfig) -> Result<(&'static str, Vec<(f64, usize)>), ConfigError> {
    let (std, workers) = match cfg.mode {
        Mode::Simulate => (cfg.simulator.worker_time_std, cfg.simulator.workers),
        Mode::Run => (0.0, cfg.runtime.workers),
    };
    let s = &cfg.sweep;
    if !s.worker_time_std.is_empty() && !s.workers.is_empty() {
        return Err(ConfigError { path: Some("sweep".into()), line: None, message: "sweep one parameter at a time".into() });
    }
    if cfg.mode == Mode::Run && !s.worker_time_std.is_empty() {
        return Err(ConfigError { path: Some("sweep.worker_time_std".into()), line: None, message: "only simulate mode sweeps σ_w".into() });
    }
    Ok(if !s.worker_time_std.is_empty() {
        ("sigma", s.worker_time_std.iter().map(|&v| (v, workers)).collect())
    } else if !s.workers.is_empty() {
        ("workers", s.workers.iter().map(|&w| (std, w)).collect())
    } else if cfg.mode == Mode::Simulate {
        ("sigma", vec![(std, workers)])
    } else {
        ("workers", vec![(std, workers)])
    })
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n: &usize| n > 0)
}

/// Removes files written so far when dropped without `keep`.
struct Cleanup {
    files: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    keep: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(dir) = &self.created_dir {
            let _ = fs::remove_dir(dir);
        }
    }
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    let mut out = BufWriter::new(file);
    write(&mut out).and_then(|_| out.flush()).map_err(io_err(format!("writing {}", path.display())))
}

/// Executes the whole experiment described by `cfg`, writing traces and
/// `summary.json` into `cfg.output`. On failure every file written by this
/// call is removed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let (param, points) = sweep_points(cfg)?;
    let problem = build_problem(cfg)?;
    let optimum = problem.optimum();
    let epsilon = cfg.target.map(|t| t.epsilon).filter(|_| optimum.is_some());

    let out_dir = &cfg.output;
    let created_dir = (!out_dir.exists()).then(|| out_dir.clone());
    fs::create_dir_all(out_dir).map_err(io_err(format!("creating {}", out_dir.display())))?;
    let mut cleanup = Cleanup { files: Vec::new(), created_dir, keep: false };

    let cap = thread_cap();
    let mut summaries = Vec::new();
    let mut report_lines = Vec::new();
    for &algorithm in &cfg.algorithms {
        for &(std, workers) in &points {
            let workers = match (cfg.mode, cap) {
                (Mode::Run, Some(c)) => workers.min(c),
                _ => workers,
            };
            let value = if param == "sigma" { std } else { workers as f64 };
            let point = Point { algorithm, worker_time_std: std, workers };
            let mut reps = Vec::new();
            for rep in 0..cfg.repetitions {
                let seed = cfg.seed.wrapping_add(rep as u64);
                let outcome = run_point(cfg, &problem, point, seed)?;
                let name = trace_file_name(algorithm, param, value, rep);
                let path = out_dir.join(&name);
                let with_rmse = matches!(problem, Problem::Factorization { .. });
                cleanup.files.push(path.clone());
                write_file(&path, |out| write_trace(out, &outcome.records, with_rmse))?;
                if let Some(line) = &outcome.report_line {
                    report_lines.push(line.clone());
                }
                let last = outcome.records.last().expect("traces hold the initial record");
                reps.push(RepSummary {
                    rep,
                    seed,
                    file: name,
                    iterations: outcome.iterations,
                    end_time: outcome.end_time,
                    max_staleness: outcome.max_staleness,
                    truncated: outcome.truncated,
                    final_potential: last.potential,
                    final_rmse: last.secondary,
                    time_to_epsilon: match (optimum, epsilon) {
                        (Some(u), Some(e)) => time_to_epsilon(&outcome.records, u, e).time,
                        _ => None,
                    },
                });
            }
            let times: Vec<f64> = reps.iter().filter_map(|r| r.time_to_epsilon).collect();
            let finals: Vec<f64> = reps.iter().map(|r| r.final_potential).collect();
            let rmses: Vec<f64> = reps.iter().filter_map(|r| r.final_rmse).collect();
            summaries.push(PointSummary {
                algorithm,
                param,
                value,
                worker_time_std: std,
                workers,
                reached: times.len(),
                time_to_epsilon: stats(&times),
                final_potential: stats(&finals),
                final_rmse: stats(&rmses),
                reps,
            });
        }
    }

    let speedup = if cfg.mode == Mode::Run && param == "workers" { speedup_table(&summaries, epsilon.is_some()) } else { Vec::new() };
    let summary = Summary {
        mode: cfg.mode,
        base_seed: cfg.seed,
        records: problem.records(),
        dim: problem.dim(),
        optimum,
        epsilon,
        absolute_epsilon: optimum == Some(0.0),
        points: summaries,
        speedup,
    };
    let summary_path = out_dir.join("summary.json");
    cleanup.files.push(summary_path.clone());
    write_file(&summary_path, |out| {
        serde_json::to_writer_pretty(&mut *out, &summary).map_err(io::Error::other)?;
        writeln!(out)
    })?;

    cleanup.keep = true;
    let mut files = std::mem::take(&mut cleanup.files);
    files.pop();
    Ok(ExperimentOutcome { files, summary_path, summary, report_lines })
}

/// Time ratio against the single-worker point of the same algorithm, using
/// time to ε when a target is known and total run time otherwise.
fn speedup_table(points: &[PointSummary], use_epsilon: bool) -> Vec<SpeedupRow> {
    let time = |p: &PointSummary| {
        if use_epsilon {
            p.time_to_epsilon.map(|s| s.mean)
        } else {
            stats(&p.reps.iter().map(|r| r.end_time).collect::<Vec<_>>()).map(|s| s.mean)
        }
    };
    points
        .iter()
        .filter_map(|p| {
            let base = points.iter().find(|q| q.algorithm == p.algorithm && q.workers == 1).and_then(time)?;
            let t = time(p)?;
            Some(SpeedupRow { algorithm: p.algorithm, workers: p.workers, mean_time: t, speedup: base / t })
        })
        .collect()
}
