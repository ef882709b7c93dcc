//! Shared-memory asynchronous execution with real threads.
//!
//! The master is not a thread: applying an update is an exclusive section
//! on [`SharedMasterState`], and workers read snapshots through a seqlock
//! so a read never blocks an apply and never sees a half-written state.

use std::collections::BTreeMap;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use asqn_core::model::{potential, Dataset, Model};
use asqn_core::rng::worker_stream;
use asqn_core::sampler::{AsyncRule, AsyncWorker, ParameterState, UpdateVector};
use asqn_core::simulator::{StopTarget, TraceRecord};
use asqn_core::Error;
use serde::Serialize;

/// One applied update as seen by the master.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    /// Iteration produced by this update.
    pub iteration: u64,
    pub staleness: u64,
}

/// Outcome of [`SharedMasterState::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    /// The update became iteration `iteration`.
    Done { iteration: u64, staleness: u64, state: Option<ParameterState> },
    /// The run stopped before the update could be applied.
    Discarded,
}

struct Writer {
    log: Vec<AuditEntry>,
    audit: bool,
    /// Read iterations of snapshots whose update is not applied yet.
    /// Only maintained when a staleness bound is set.
    in_flight: BTreeMap<u64, usize>,
}

/// The master's iterate, readable by any number of threads.
pub struct SharedMasterState {
    /// Even when stable, odd while an apply is writing. `n = base + version / 2`.
    version: AtomicU64,
    base: u64,
    theta: Box<[AtomicU64]>,
    momentum: Box<[AtomicU64]>,
    writer: Mutex<Writer>,
    limit: Option<u64>,
    gate: Condvar,
    stop: AtomicBool,
    max_iterations: u64,
}

fn bits(values: &[f64]) -> Box<[AtomicU64]> {
    values.iter().map(|v| AtomicU64::new(v.to_bits())).collect()
}

impl SharedMasterState {
    /// `staleness_bound` enables back-pressure: snapshots and applies wait
    /// so that no applied update is staler than the bound.
    pub fn new(initial: ParameterState, max_iterations: u64, staleness_bound: Option<u64>, audit: bool) -> Self {
        SharedMasterState {
            version: AtomicU64::new(0),
            base: initial.iteration,
            theta: bits(&initial.theta),
            momentum: bits(&initial.momentum),
            writer: Mutex::new(Writer { log: Vec::new(), audit, in_flight: BTreeMap::new() }),
            limit: staleness_bound,
            gate: Condvar::new(),
            stop: AtomicBool::new(false),
            max_iterations,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn iteration(&self) -> u64 {
        self.base + self.version.load(Ordering::Acquire) / 2
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Release);
        // wake gated workers; taking the lock orders this with their check
        drop(self.lock());
        self.gate.notify_all();
    }

    pub fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    fn lock(&self) -> MutexGuard<'_, Writer> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// A consistent copy of `(θ, u, n)`. Retries while an apply is in
    /// progress; never takes the apply lock.
    pub fn snapshot(&self) -> ParameterState {
        let d = self.dim();
        let mut theta = vec![0.0; d];
        let mut momentum = vec![0.0; d];
        loop {
            let v1 = self.version.load(Ordering::Acquire);
            if v1 % 2 == 1 {
                std::hint::spin_loop();
                thread::yield_now();
                continue;
            }
            for (out, cell) in theta.iter_mut().zip(self.theta.iter()) {
                *out = f64::from_bits(cell.load(Ordering::Relaxed));
            }
            for (out, cell) in momentum.iter_mut().zip(self.momentum.iter()) {
                *out = f64::from_bits(cell.load(Ordering::Relaxed));
            }
            fence(Ordering::Acquire);
            if self.version.load(Ordering::Relaxed) == v1 {
                return ParameterState { theta, momentum, iteration: self.base + v1 / 2 };
            }
        }
    }

    /// Snapshot for a worker about to compute. With a staleness bound this
    /// registers the read and may wait; `None` means the run stopped.
    pub fn checkout(&self) -> Option<ParameterState> {
        let Some(limit) = self.limit else {
            return (!self.stopped()).then(|| self.snapshot());
        };
        let mut w = self.lock();
        loop {
            if self.stopped() {
                return None;
            }
            // the newest read sorts last; it could be applied after every
            // other in-flight update
            let count: usize = w.in_flight.values().sum();
            if count as u64 <= limit {
                break;
            }
            w = self.gate.wait(w).unwrap_or_else(|e| e.into_inner());
        }
        // applies hold the lock, so this read is stable
        let snap = self.snapshot();
        *w.in_flight.entry(snap.iteration).or_default() += 1;
        Some(snap)
    }

    /// Whether the in-flight reads other than `own` stay within `limit` if
    /// the iteration counter becomes `next`.
    fn others_within(in_flight: &BTreeMap<u64, usize>, own: u64, next: u64, limit: u64) -> bool {
        let mut position = 0u64;
        let mut skipped = false;
        for (&read, &count) in in_flight {
            let mut count = count as u64;
            if read == own && !skipped {
                count -= 1;
                skipped = true;
            }
            for _ in 0..count {
                if next + position - read > limit {
                    return false;
                }
                position += 1;
            }
        }
        true
    }

    /// Exclusive master step: `(θ, u) += (Δθ, Δu)`, `n += 1`. A non-finite
    /// result leaves the state untouched and reports divergence.
    pub fn apply(&self, update: &UpdateVector) -> Result<Applied, Error> {
        self.apply_with(update, |_| false)
    }

    /// [`apply`](Self::apply), copying the new state out under the lock
    /// when `keep(new_iteration)` holds.
    pub fn apply_with(&self, update: &UpdateVector, keep: impl FnOnce(u64) -> bool) -> Result<Applied, Error> {
        let d = self.dim();
        if update.d_theta.len() != d || update.d_momentum.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: update.d_theta.len() });
        }
        let mut w = self.lock();
        if let Some(limit) = self.limit {
            loop {
                if self.stopped() {
                    release(&mut w.in_flight, update.read_iteration);
                    self.gate.notify_all();
                    return Ok(Applied::Discarded);
                }
                let next = self.iteration() + 1;
                if Self::others_within(&w.in_flight, update.read_iteration, next, limit) {
                    break;
                }
                w = self.gate.wait(w).unwrap_or_else(|e| e.into_inner());
            }
        }
        let v = self.version.load(Ordering::Relaxed);
        let n = self.base + v / 2;
        if self.stopped() || n - self.base >= self.max_iterations {
            if self.limit.is_some() {
                release(&mut w.in_flight, update.read_iteration);
                self.gate.notify_all();
            }
            return Ok(Applied::Discarded);
        }

        let load = |cells: &[AtomicU64], i: usize| f64::from_bits(cells[i].load(Ordering::Relaxed));
        let theta: Vec<f64> = (0..d).map(|i| load(&self.theta, i) + update.d_theta[i]).collect();
        let momentum: Vec<f64> = (0..d).map(|i| load(&self.momentum, i) + update.d_momentum[i]).collect();
        if theta.iter().chain(&momentum).any(|x| !x.is_finite()) {
            if self.limit.is_some() {
                release(&mut w.in_flight, update.read_iteration);
                self.gate.notify_all();
            }
            return Err(Error::Divergence { iteration: n + 1, quantity: "iterate" });
        }

        self.version.store(v + 1, Ordering::Relaxed);
        fence(Ordering::Release);
        for (cell, x) in self.theta.iter().zip(&theta) {
            cell.store(x.to_bits(), Ordering::Relaxed);
        }
        for (cell, x) in self.momentum.iter().zip(&momentum) {
            cell.store(x.to_bits(), Ordering::Relaxed);
        }
        self.version.store(v + 2, Ordering::Release);

        let staleness = n.saturating_sub(update.read_iteration);
        if w.audit {
            w.log.push(AuditEntry { iteration: n + 1, staleness });
        }
        if self.limit.is_some() {
            release(&mut w.in_flight, update.read_iteration);
            self.gate.notify_all();
        }
        if n + 1 - self.base >= self.max_iterations {
            self.stop.store(true, Ordering::Release);
            self.gate.notify_all();
        }
        Ok(Applied::Done {
            iteration: n + 1,
            staleness,
            state: keep(n + 1 - self.base).then(|| ParameterState { theta, momentum, iteration: n + 1 }),
        })
    }

    /// Drops a checked-out read without applying anything.
    pub fn abandon(&self, read_iteration: u64) {
        if self.limit.is_some() {
            let mut w = self.lock();
            release(&mut w.in_flight, read_iteration);
            self.gate.notify_all();
        }
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.lock().log.clone()
    }
}

fn release(in_flight: &mut BTreeMap<u64, usize>, read: u64) {
    if let Some(count) = in_flight.get_mut(&read) {
        *count -= 1;
        if *count == 0 {
            in_flight.remove(&read);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub workers: usize,
    pub max_iterations: u64,
    pub max_wall: Option<Duration>,
    pub record_every: u64,
    pub staleness_bound: Option<u64>,
    pub seed: u64,
    /// Keep the per-update `(n, staleness)` log.
    pub audit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workers: 1,
            max_iterations: 1000,
            max_wall: None,
            record_every: 1,
            staleness_bound: None,
            seed: 0,
            audit: false,
        }
    }
}

/// Hooks evaluated on recorded iterates.
#[derive(Default, Clone, Copy)]
pub struct RunProbe<'a> {
    pub target: Option<StopTarget>,
    pub secondary: Option<&'a (dyn Fn(&[f64]) -> f64 + Sync)>,
}

#[derive(Debug)]
pub struct RunReport {
    pub wall: Duration,
    pub iterations: u64,
    pub max_staleness: u64,
    pub final_potential: f64,
    pub trace: Vec<TraceRecord>,
    pub final_state: ParameterState,
    pub audit: Vec<AuditEntry>,
    /// Updates computed but not applied because the run stopped first.
    pub discarded: u64,
    /// Set when a worker failed; the rest of the report is partial.
    pub error: Option<Error>,
}

#[derive(Serialize)]
struct Summary {
    wall_ms: f64,
    iters: u64,
    max_staleness: u64,
    final_potential: f64,
}

impl RunReport {
    /// The one-line JSON summary.
    pub fn summary_line(&self) -> String {
        serde_json::to_string(&Summary {
            wall_ms: self.wall.as_secs_f64() * 1e3,
            iters: self.iterations,
            max_staleness: self.max_staleness,
            final_potential: self.final_potential,
        })
        .expect("summary serializes")
    }
}

struct Shared<'a, M: Model> {
    master: SharedMasterState,
    model: &'a M,
    data: &'a Dataset<M::Record>,
    cfg: &'a RunConfig,
    probe: RunProbe<'a>,
    start: Instant,
    records: Mutex<Vec<TraceRecord>>,
    error: Mutex<Option<Error>>,
    max_staleness: AtomicU64,
    discarded: AtomicU64,
}

impl<M: Model> Shared<'_, M> {
    fn fail(&self, e: Error) {
        let mut slot = self.error.lock().unwrap_or_else(|p| p.into_inner());
        if slot.is_none() {
            *slot = Some(e);
        }
        drop(slot);
        self.master.stop();
    }

    fn record(&self, state: &ParameterState, staleness: u64, time: f64) -> Result<(), Error> {
        let u = potential(self.model, self.data, &state.theta)?;
        if !u.is_finite() {
            return Err(Error::Divergence { iteration: state.iteration, quantity: "potential" });
        }
        let record = TraceRecord {
            time,
            iteration: state.iteration,
            staleness,
            potential: u,
            secondary: self.probe.secondary.map(|f| f(&state.theta)),
        };
        self.records.lock().unwrap_or_else(|p| p.into_inner()).push(record);
        if self.probe.target.is_some_and(|t| t.reached(u)) {
            self.master.stop();
        }
        Ok(())
    }

    fn worker_loop(&self, mut worker: AsyncWorker) -> Result<(), Error> {
        while let Some(snapshot) = self.master.checkout() {
            if self.cfg.max_wall.is_some_and(|limit| self.start.elapsed() >= limit) {
                self.master.abandon(snapshot.iteration);
                self.master.stop();
                break;
            }
            let update = match worker.compute(&snapshot, self.model, self.data) {
                Ok(u) => u,
                Err(e) => {
                    self.master.abandon(snapshot.iteration);
                    return Err(e);
                }
            };
            let every = self.cfg.record_every;
            match self.master.apply_with(&update, |k| k % every == 0)? {
                Applied::Done { staleness, state, .. } => {
                    self.max_staleness.fetch_max(staleness, Ordering::Relaxed);
                    if let Some(state) = state {
                        self.record(&state, staleness, self.start.elapsed().as_secs_f64())?;
                    }
                }
                Applied::Discarded => {
                    self.discarded.fetch_add(1, Ordering::Relaxed);
                    break;
                }
            }
            worker.after_send(self.model, self.data)?;
        }
        Ok(())
    }
}

/// Runs `cfg.workers` threads of `rule` until `max_iterations` updates are
/// applied, the wall-clock limit passes, the probe target is reached or a
/// worker fails. Worker `w` draws from `worker_stream(seed, w)`.
pub fn run<M>(
    cfg: &RunConfig,
    rule: &AsyncRule,
    initial: ParameterState,
    model: &M,
    data: &Dataset<M::Record>,
    probe: RunProbe<'_>,
) -> Result<RunReport, Error>
where
    M: Model + Sync,
    M::Record: Sync,
{
    if cfg.workers == 0 {
        return Err(Error::Config("runtime needs at least one worker".into()));
    }
    if cfg.record_every == 0 || cfg.max_iterations == 0 {
        return Err(Error::Config("record interval and iteration budget must be positive".into()));
    }
    rule.validate()?;
    if initial.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), found: initial.dim() });
    }
    let workers = (0..cfg.workers)
        .map(|w| AsyncWorker::new(rule.clone(), initial.dim(), worker_stream(cfg.seed, w)))
        .collect::<Result<Vec<_>, _>>()?;

    let initial_potential = potential(model, data, &initial.theta)?;
    let shared = Shared {
        master: SharedMasterState::new(initial.clone(), cfg.max_iterations, cfg.staleness_bound, cfg.audit),
        model,
        data,
        cfg,
        probe,
        start: Instant::now(),
        records: Mutex::new(Vec::new()),
        error: Mutex::new(None),
        max_staleness: AtomicU64::new(0),
        discarded: AtomicU64::new(0),
    };
    shared.record(&initial, 0, 0.0)?;
    if shared.master.stopped() {
        // already on target
        let wall = shared.start.elapsed();
        return Ok(RunReport {
            wall,
            iterations: 0,
            max_staleness: 0,
            final_potential: initial_potential,
            trace: shared.records.into_inner().unwrap_or_else(|p| p.into_inner()),
            final_state: initial,
            audit: Vec::new(),
            discarded: 0,
            error: None,
        });
    }

    thread::scope(|scope| {
        for worker in workers {
            let shared = &shared;
            scope.spawn(move || {
                if let Err(e) = shared.worker_loop(worker) {
                    shared.fail(e);
                }
            });
        }
    });
    let wall = shared.start.elapsed();

    let final_state = shared.master.snapshot();
    let iterations = final_state.iteration - initial.iteration;
    let mut trace = shared.records.into_inner().unwrap_or_else(|p| p.into_inner());
    trace.sort_by_key(|r| r.iteration);
    let error = shared.error.into_inner().unwrap_or_else(|p| p.into_inner());
    let final_potential = match trace.last() {
        Some(r) if r.iteration == final_state.iteration => r.potential,
        _ => potential(model, data, &final_state.theta).unwrap_or(f64::NAN),
    };
    if error.is_none() && trace.last().is_none_or(|r| r.iteration != final_state.iteration) {
        trace.push(TraceRecord {
            time: wall.as_secs_f64(),
            iteration: final_state.iteration,
            staleness: shared.master.audit_log().last().map_or(0, |e| e.staleness),
            potential: final_potential,
            secondary: probe.secondary.map(|f| f(&final_state.theta)),
        });
    }
    Ok(RunReport {
        wall,
        iterations,
        max_staleness: shared.max_staleness.load(Ordering::Relaxed),
        final_potential,
        trace,
        audit: shared.master.audit_log(),
        discarded: shared.discarded.load(Ordering::Relaxed),
        final_state,
        error,
    })
}
