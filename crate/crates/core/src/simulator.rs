//! Deterministic discrete-event simulation of master/worker optimization.
//!
//! Time is virtual (base units). Worker compute times are log-normal with a
//! given mean and standard deviation, every message leg costs `τ`, and the
//! master charges `μ_m` per application. The simulator only decides which
//! snapshot each worker reads and in which order updates reach the master;
//! the parameter arithmetic is the same as in a serial execution with that
//! interleaving.
//!
//! Events are ordered by `(time, worker, sequence)`, so runs are bit
//! reproducible for a given seed.

use alloc::collections::{BinaryHeap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::lbfgs::LbfgsMemory;
use crate::model::{combined_gradient, draw_subsample, potential, Dataset, Model};
use crate::rng::{standard_normal, stream, worker_stream, Stream};
use crate::sampler::{
    master_apply_in_place, mb_lbfgs_round, AsyncRule, AsyncWorker, MbOverlapState, ParameterState, UpdateVector,
    WorkerGradient,
};

/// Offset separating the compute-time stream from the worker streams.
const TIMING_STREAM: u64 = 0x7469_6d69_6e67;

/// How worker compute-time variability is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpeedModel {
    /// A fresh draw for every computation.
    #[default]
    PerDraw,
    /// One draw per worker at start-up, reused for every computation.
    PerWorker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub workers: usize,
    /// `μ_m`
    pub master_time: f64,
    /// `μ_w`
    pub worker_time: f64,
    /// `σ_w`, the standard deviation of a worker compute time.
    pub worker_time_std: f64,
    /// `τ`, per message leg.
    pub comm_time: f64,
    /// `T_mb`, synchronous round timeout.
    pub round_timeout: f64,
    pub max_time: f64,
    pub max_iterations: u64,
    /// Potential is evaluated every this many iterations.
    pub record_every: u64,
    pub speed_model: SpeedModel,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            workers: 1,
            master_time: 0.0,
            worker_time: 1.0,
            worker_time_std: 0.0,
            comm_time: 0.0,
            round_timeout: f64::INFINITY,
            max_time: f64::INFINITY,
            max_iterations: 1000,
            record_every: 1,
            speed_model: SpeedModel::PerDraw,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("simulator needs at least one worker"));
        }
        let times = [self.master_time, self.worker_time, self.worker_time_std, self.comm_time];
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::config("simulator times must be finite and nonnegative"));
        }
        if !(self.round_timeout > 0.0) {
            return Err(Error::config("round timeout must be positive"));
        }
        if !(self.max_time > 0.0) || self.max_iterations == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        if !self.max_time.is_finite() && self.max_iterations == u64::MAX {
            return Err(Error::config("horizon must be bounded in time or iterations"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record interval must be positive"));
        }
        Ok(())
    }
}

/// Draws a log-normal compute time with mean `mean` and standard deviation
/// `std`. The underlying normal has `s² = ln(1 + std²/mean²)` and
/// `m = ln(mean) - s²/2`. `std = 0` gives the constant `mean`.
pub fn sample_compute_time<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> Result<f64> {
    let (m, s) = lognormal_parameters(mean, std)?;
    if mean == 0.0 {
        return Ok(0.0);
    }
    if s == 0.0 {
        return Ok(mean);
    }
    Ok(libm::exp(m + s * standard_normal(rng)))
}

/// `(m, s)` of the normal whose exponential has the given mean and std.
pub fn lognormal_parameters(mean: f64, std: f64) -> Result<(f64, f64)> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(Error::invalid("mean compute time must be nonnegative"));
    }
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid("compute time deviation must be nonnegative"));
    }
    if mean == 0.0 {
        return Ok((f64::NEG_INFINITY, 0.0));
    }
    let s2 = libm::log1p((std / mean) * (std / mean));
    Ok((libm::log(mean) - 0.5 * s2, libm::sqrt(s2)))
}

/// One sampled point of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub iteration: u64,
    /// Staleness of the update that produced this iterate (0 for the initial
    /// record and for synchronous rounds).
    pub staleness: u64,
    pub potential: f64,
    pub secondary: Option<f64>,
}

/// Relative ε-accuracy target `(U - U*)/U* ≤ ε`, used for early stopping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopTarget {
    pub optimum: f64,
    pub epsilon: f64,
}

impl StopTarget {
    pub fn reached(&self, value: f64) -> bool {
        epsilon_reached(value, self.optimum, self.epsilon)
    }
}

fn epsilon_reached(value: f64, optimum: f64, epsilon: f64) -> bool {
    if optimum == 0.0 {
        value <= epsilon
    } else {
        (value - optimum) / optimum <= epsilon
    }
}

/// Optional hooks evaluated at each recorded iterate.
#[derive(Default, Clone, Copy)]
pub struct Probe<'a> {
    pub target: Option<StopTarget>,
    /// Secondary metric (e.g. RMSE) written next to the potential.
    pub secondary: Option<&'a dyn Fn(&[f64]) -> f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// The horizon ran out before the target (or the iteration budget when
    /// no target was set) was reached.
    pub truncated: bool,
    /// Staleness of every applied update, in application order.
    pub staleness: Vec<u64>,
    /// Updates delivered to the master (async runs).
    pub sends: u64,
    /// Delivered updates still queued or being applied when the run stopped.
    pub unapplied: u64,
    /// Gradients aggregated in each round (synchronous runs).
    pub included: Vec<usize>,
    pub final_state: ParameterState,
    pub end_time: f64,
}

impl Trace {
    pub fn applied(&self) -> u64 {
        self.final_state.iteration
    }

    pub fn max_staleness(&self) -> u64 {
        self.staleness.iter().copied().max().unwrap_or(0)
    }
}

/// Result of scanning a trace for ε-accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonTime {
    pub time: Option<f64>,
    /// `U* = 0`: the absolute criterion `U ≤ ε` was used instead.
    pub absolute: bool,
}

/// First record time with `(U - U*)/U* ≤ ε`. With `U* = 0` the absolute
/// gap `U ≤ ε` is used and flagged.
pub fn time_to_epsilon(records: &[TraceRecord], optimum: f64, epsilon: f64) -> EpsilonTime {
    EpsilonTime {
        time: records
            .iter()
            .find(|r| epsilon_reached(r.potential, optimum, epsilon))
            .map(|r| r.time),
        absolute: optimum == 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EventKey {
    time: f64,
    worker: usize,
    seq: u64,
}

impl Eq for EventKey {}

impl Ord for EventKey {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.worker.cmp(&self.worker))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for EventKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
enum EventKind {
    /// The worker received a snapshot and starts computing.
    Deliver(ParameterState),
    /// An update reached the master.
    Arrive(UpdateVector),
    /// The master finished applying the update from `worker`.
    MasterDone(UpdateVector),
}

#[derive(Debug)]
struct Event {
    key: EventKey,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key)
    }
}

struct Queue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: f64, worker: usize, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            key: EventKey { time, worker, seq: self.seq },
            kind,
        });
    }
}

struct ComputeClock {
    rng: Stream,
    fixed: Option<Vec<f64>>,
    mean: f64,
    std: f64,
}

impl ComputeClock {
    fn new(cfg: &SimConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed ^ TIMING_STREAM);
        let fixed = match cfg.speed_model {
            SpeedModel::PerDraw => None,
            SpeedModel::PerWorker => Some(
                (0..cfg.workers)
                    .map(|_| sample_compute_time(&mut rng, cfg.worker_time, cfg.worker_time_std))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(ComputeClock { rng, fixed, mean: cfg.worker_time, std: cfg.worker_time_std })
    }

    fn next(&mut self, worker: usize) -> f64 {
        match &self.fixed {
            Some(t) => t[worker],
            None => sample_compute_time(&mut self.rng, self.mean, self.std).expect("validated times"),
        }
    }
}

struct Recorder<'a, 'p, M: Model> {
    model: &'a M,
    data: &'a Dataset<M::Record>,
    probe: Probe<'p>,
    every: u64,
    records: Vec<TraceRecord>,
    reached: bool,
}

impl<'a, 'p, M: Model> Recorder<'a, 'p, M> {
    fn record(&mut self, time: f64, state: &ParameterState, staleness: u64) -> Result<()> {
        if self.records.last().is_some_and(|r| r.iteration == state.iteration) {
            return Ok(());
        }
        let u = potential(self.model, self.data, &state.theta)?;
        if !u.is_finite() {
            return Err(Error::Divergence { iteration: state.iteration, quantity: "potential" });
        }
        if let Some(t) = self.probe.target {
            self.reached |= t.reached(u);
        }
        self.records.push(TraceRecord {
            time,
            iteration: state.iteration,
            staleness,
            potential: u,
            secondary: self.probe.secondary.map(|f| f(&state.theta)),
        });
        Ok(())
    }

    fn maybe_record(&mut self, time: f64, state: &ParameterState, staleness: u64) -> Result<()> {
        if state.iteration % self.every == 0 {
            self.record(time, state, staleness)?;
        }
        Ok(())
    }
}

/// Simulates an asynchronous run of `rule` with `cfg.workers` workers.
///
/// Each worker cycles: receive a snapshot (`τ` after the master sent it),
/// compute for a sampled time, send (`τ`). The master applies arrivals one
/// at a time in FIFO order, charging `μ_m` each, and replies to the sender
/// with the new iterate. Staleness is `n_at_apply - n_at_read`.
pub fn run_async<M: Model>(
    cfg: &SimConfig,
    rule: &AsyncRule,
    initial: ParameterState,
    model: &M,
    data: &Dataset<M::Record>,
    probe: Probe<'_>,
) -> Result<Trace> {
    cfg.validate()?;
    rule.validate()?;
    let dim = initial.dim();
    crate::error::check_dim(model.dim(), dim)?;

    let mut workers = (0..cfg.workers)
        .map(|w| AsyncWorker::new(rule.clone(), dim, worker_stream(cfg.seed, w)))
        .collect::<Result<Vec<_>>>()?;
    let mut clock = ComputeClock::new(cfg)?;
    let mut queue = Queue { heap: BinaryHeap::new(), seq: 0 };
    let mut recorder = Recorder {
        model,
        data,
        probe,
        every: cfg.record_every,
        records: Vec::new(),
        reached: false,
    };

    let mut state = initial;
    let start_iteration = state.iteration;
    let mut inbox: VecDeque<(usize, UpdateVector)> = VecDeque::new();
    let mut master_busy = false;
    let mut staleness_log = Vec::new();
    let mut sends = 0u64;
    let mut now = 0.0;
    let mut last_stale = 0;

    recorder.record(0.0, &state, 0)?;
    for w in 0..cfg.workers {
        queue.push(cfg.comm_time, w, EventKind::Deliver(state.clone()));
    }

    let budget_done = |s: &ParameterState| s.iteration - start_iteration >= cfg.max_iterations;

    while !recorder.reached && !budget_done(&state) {
        let Some(event) = queue.heap.pop() else { break };
        if event.key.time > cfg.max_time {
            break;
        }
        now = event.key.time;
        let worker = event.key.worker;
        match event.kind {
            EventKind::Deliver(snapshot) => {
                let update = workers[worker].compute(&snapshot, model, data)?;
                workers[worker].after_send(model, data)?;
                let done = now + clock.next(worker) + cfg.comm_time;
                queue.push(done, worker, EventKind::Arrive(update));
            }
            EventKind::Arrive(update) => {
                sends += 1;
                inbox.push_back((worker, update));
            }
            EventKind::MasterDone(update) => {
                let staleness = update.staleness(state.iteration);
                master_apply_in_place(&mut state, &update)?;
                staleness_log.push(staleness);
                last_stale = staleness;
                recorder.maybe_record(now, &state, staleness)?;
                queue.push(now + cfg.comm_time, worker, EventKind::Deliver(state.clone()));
                master_busy = false;
            }
        }
        if !master_busy {
            if let Some((w, update)) = inbox.pop_front() {
                master_busy = true;
                queue.push(now + cfg.master_time, w, EventKind::MasterDone(update));
            }
        }
    }

    recorder.record(now, &state, last_stale)?;
    let unapplied = inbox.len() as u64 + u64::from(master_busy);
    let truncated = match recorder.probe.target {
        Some(_) => !recorder.reached,
        None => !budget_done(&state),
    };
    Ok(Trace {
        records: recorder.records,
        truncated,
        staleness: staleness_log,
        sends,
        unapplied,
        included: Vec::new(),
        end_time: now,
        final_state: state,
    })
}

/// Hyperparameters of the simplified synchronous multi-batch L-BFGS
/// baseline (`mb-lbfgs-simplified`).
#[derive(Debug, Clone, PartialEq)]
pub struct MbConfig {
    pub step: f64,
    pub memory_size: usize,
    pub cautious_epsilon: f64,
    pub shift: f64,
    pub large_batch: usize,
    pub overlap_batch: usize,
}

impl MbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::config("mb-L-BFGS step must be positive"));
        }
        if self.large_batch == 0 || self.overlap_batch == 0 {
            return Err(Error::config("mb-L-BFGS subsample parts must be positive"));
        }
        Ok(())
    }
}

/// Simulates the synchronous baseline.
///
/// Per round the master broadcasts θ (`τ`); every idle worker computes a
/// combined gradient for a sampled time; gradients whose compute time is
/// within `T_mb` are aggregated (`τ` back), the rest are discarded and
/// their workers stay busy until they finish. A round takes
/// `min(T_mb, max compute time) + μ_m + 2τ`.
pub fn run_sync_mb<M: Model>(
    cfg: &SimConfig,
    mb: &MbConfig,
    initial: ParameterState,
    model: &M,
    data: &Dataset<M::Record>,
    probe: Probe<'_>,
) -> Result<Trace> {
    cfg.validate()?;
    mb.validate()?;
    let dim = initial.dim();
    crate::error::check_dim(model.dim(), dim)?;

    let mut memory = LbfgsMemory::new(dim, mb.memory_size, mb.cautious_epsilon, mb.shift)?;
    let mut book = MbOverlapState::default();
    let mut rngs: Vec<Stream> = (0..cfg.workers).map(|w| worker_stream(cfg.seed, w)).collect();
    let mut clock = ComputeClock::new(cfg)?;
    let mut busy_until = vec![0.0f64; cfg.workers];
    let mut recorder = Recorder {
        model,
        data,
        probe,
        every: cfg.record_every,
        records: Vec::new(),
        reached: false,
    };

    let mut state = initial;
    let start_iteration = state.iteration;
    let mut included_log = Vec::new();
    let mut now = 0.0;
    recorder.record(0.0, &state, 0)?;

    let weight = (mb.large_batch + mb.overlap_batch) as f64;
    while !recorder.reached && state.iteration - start_iteration < cfg.max_iterations {
        let arrival = now + cfg.comm_time;
        let mut slowest = 0.0f64;
        let mut any = false;
        let mut received = Vec::new();
        for w in 0..cfg.workers {
            if busy_until[w] > arrival {
                continue;
            }
            let compute = clock.next(w);
            busy_until[w] = arrival + compute;
            slowest = slowest.max(compute);
            any = true;
            if compute <= cfg.round_timeout {
                let omega = draw_subsample(&mut rngs[w], data.len(), mb.large_batch, mb.overlap_batch)?;
                let gradient = combined_gradient(model, data, &state.theta, &omega)?;
                received.push(WorkerGradient { gradient, weight, overlap: omega.overlap });
            }
        }
        let wait = if any { slowest.min(cfg.round_timeout) } else { cfg.round_timeout };
        let end = now + 2.0 * cfg.comm_time + wait + cfg.master_time;
        if end > cfg.max_time {
            break;
        }
        now = end;
        included_log.push(received.len());
        let next = mb_lbfgs_round(&mut memory, &mut book, &state.theta, mb.step, &received, model, data).map_err(|e| {
            match e {
                Error::Divergence { quantity, .. } => Error::Divergence { iteration: state.iteration + 1, quantity },
                other => other,
            }
        })?;
        state.theta = next;
        state.iteration += 1;
        recorder.maybe_record(now, &state, 0)?;
    }

    recorder.record(now, &state, 0)?;
    let truncated = match recorder.probe.target {
        Some(_) => !recorder.reached,
        None => state.iteration - start_iteration < cfg.max_iterations,
    };
    Ok(Trace {
        records: recorder.records,
        truncated,
        staleness: vec![0; included_log.len()],
        sends: included_log.iter().map(|&n| n as u64).sum(),
        unapplied: 0,
        included: included_log,
        end_time: now,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearGaussianModel, Observation};
    use crate::sampler::{AsgdConfig, SamplerConfig};

    fn problem() -> (LinearGaussianModel, Dataset<Observation>) {
        let m = LinearGaussianModel::new(2, 1.0).unwrap();
        let recs = (0..10)
            .map(|i| {
                let x = i as f64 / 10.0;
                Observation { features: vec![1.0, x], target: 2.0 * x - 0.5 }
            })
            .collect();
        (m.clone(), Dataset::for_model(&m, recs).unwrap())
    }

    fn asgd() -> AsyncRule {
        AsyncRule::Asgd(AsgdConfig { step: 0.01, batch: 2, friction: None })
    }

    #[test]
    fn constant_time_without_variance() {
        let mut rng = stream(0);
        for _ in 0..10 {
            assert_eq!(sample_compute_time(&mut rng, 5.0, 0.0).unwrap(), 5.0);
        }
        assert_eq!(sample_compute_time(&mut rng, 0.0, 3.0).unwrap(), 0.0);
        assert!(sample_compute_time(&mut rng, -1.0, 0.0).is_err());
    }

    #[test]
    fn single_worker_is_never_stale() {
        let (m, d) = problem();
        let cfg = SimConfig { workers: 1, worker_time: 3.0, worker_time_std: 2.0, comm_time: 1.0, max_iterations: 200, ..Default::default() };
        let trace = run_async(&cfg, &asgd(), ParameterState::at_rest(vec![0.0; 2]).unwrap(), &m, &d, Probe::default()).unwrap();
        assert_eq!(trace.applied(), 200);
        assert!(trace.staleness.iter().all(|&l| l == 0));
        assert!(!trace.truncated);
    }

    #[test]
    fn two_identical_workers_alternate() {
        let (m, d) = problem();
        let cfg = SimConfig { workers: 2, worker_time: 4.0, max_iterations: 100, ..Default::default() };
        let trace = run_async(&cfg, &asgd(), ParameterState::at_rest(vec![0.0; 2]).unwrap(), &m, &d, Probe::default()).unwrap();
        assert_eq!(trace.staleness[0], 0);
        assert!(trace.staleness[1..].iter().all(|&l| l == 1));
        assert_eq!(trace.max_staleness(), 1);
    }

    #[test]
    fn pipelined_time_for_identical_workers() {
        let (m, d) = problem();
        for (w, n) in [(1usize, 10u64), (3, 10), (4, 12), (8, 100)] {
            let cfg = SimConfig { workers: w, worker_time: 7.0, max_iterations: n, ..Default::default() };
            let trace = run_async(&cfg, &asgd(), ParameterState::at_rest(vec![0.0; 2]).unwrap(), &m, &d, Probe::default()).unwrap();
            assert_eq!(trace.end_time, n.div_ceil(w as u64) as f64 * 7.0, "W = {w}, N = {n}");
        }
    }

    #[test]
    fn horizon_truncates() {
        let (m, d) = problem();
        let cfg = SimConfig { workers: 2, worker_time: 1.0, max_time: 10.0, max_iterations: 1_000, ..Default::default() };
        let trace = run_async(&cfg, &asgd(), ParameterState::at_rest(vec![0.0; 2]).unwrap(), &m, &d, Probe::default()).unwrap();
        assert!(trace.truncated);
        assert!(trace.end_time <= 10.0);
        assert_eq!(trace.applied(), 20);
    }

    #[test]
    fn records_are_monotone() {
        let (m, d) = problem();
        let cfg = SimConfig { workers: 3, worker_time: 2.0, worker_time_std: 1.5, comm_time: 0.5, master_time: 0.2, max_iterations: 300, record_every: 7, ..Default::default() };
        let rule = AsyncRule::AsLbfgs(SamplerConfig { large_batch: 2, overlap_batch: 1, step: 1e-3, friction: 0.1, ..Default::default() });
        let trace = run_async(&cfg, &rule, ParameterState::at_rest(vec![0.0; 2]).unwrap(), &m, &d, Probe::default()).unwrap();
        for w in trace.records.windows(2) {
            assert!(w[1].iteration > w[0].iteration);
            assert!(w[1].time >= w[0].time);
        }
        assert_eq!(trace.records.last().unwrap().iteration, 300);
    }

    #[test]
    fn epsilon_scan() {
        let rec = |time: f64, potential: f64| TraceRecord { time, iteration: time as u64, staleness: 0, potential, secondary: None };
        let trace = [rec(0.0, 1.0), rec(1.0, 0.5)];
        assert_eq!(time_to_epsilon(&trace, 1.0, 0.1).time, Some(0.0));
        assert_eq!(time_to_epsilon(&trace, 0.1, 0.1).time, None);
        let hit = time_to_epsilon(&trace, 0.0, 0.6);
        assert_eq!((hit.time, hit.absolute), (Some(1.0), true));
    }

    #[test]
    fn sync_rounds_include_everyone_without_variance() {
        let (m, d) = problem();
        let cfg = SimConfig { workers: 5, worker_time: 10.0, round_timeout: 12.0, master_time: 30.0, comm_time: 10.0, max_iterations: 20, ..Default::default() };
        let mb = MbConfig { step: 0.05, memory_size: 3, cautious_epsilon: 1e-8, shift: 0.0, large_batch: 2, overlap_batch: 1 };
        let trace = run_sync_mb(&cfg, &mb, ParameterState::at_rest(vec![0.0; 2]).unwrap(), &m, &d, Probe::default()).unwrap();
        assert!(trace.included.iter().all(|&n| n == 5));
        assert_eq!(trace.end_time, 20.0 * (10.0 + 30.0 + 20.0));
    }
}
