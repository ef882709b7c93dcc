//! Update-vector mathematics.
//!
//! A worker reads a possibly stale master state `(θ, u)` and ships back
//!
//! ```text
//! Δu = -h' H g - γ' u + sqrt(2 h' γ' / β) z
//! Δθ = H u
//! ```
//!
//! where `g` is the combined subsample gradient at the stale `θ` and `H` the
//! worker's local L-BFGS operator. The master adds the increments. After the
//! send, the worker refreshes its local memory from gradients evaluated on
//! one fixed overlap index set at two consecutive local iterates.
//!
//! Baselines (SGLD, a-SGD and a simplified synchronous multi-batch L-BFGS)
//! share the same building blocks.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::lbfgs::{LbfgsMemory, DEFAULT_CAUTIOUS_EPSILON};
use crate::linalg::{all_finite, axpy};
use crate::model::{combined_gradient, draw_subsample, stochastic_gradient, Dataset, Model, Subsample};
use crate::rng::{fill_standard_normal, Stream};

/// Hyperparameters of an as-L-BFGS worker.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// `h'`
    pub step: f64,
    /// `γ'`, in (0, 1)
    pub friction: f64,
    /// `β`; `f64::INFINITY` disables the injected noise.
    pub inverse_temperature: f64,
    pub memory_size: usize,
    /// `N_S`
    pub large_batch: usize,
    /// `N_O`
    pub overlap_batch: usize,
    pub cautious_epsilon: f64,
    /// ρ in `H + ρI`
    pub shift: f64,
    /// When false, curvature pairs are never admitted and `H` stays the
    /// identity (plus shift).
    pub curvature_updates: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            step: 4e-4,
            friction: 3e-2,
            inverse_temperature: 5e2,
            memory_size: 3,
            large_batch: 4,
            overlap_batch: 2,
            cautious_epsilon: DEFAULT_CAUTIOUS_EPSILON,
            shift: 0.0,
            curvature_updates: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config("step h' must be positive"));
        }
        if !(self.friction > 0.0 && self.friction < 1.0) {
            return Err(Error::config("friction γ' must lie in (0, 1)"));
        }
        if !(self.inverse_temperature > 0.0) {
            return Err(Error::config("inverse temperature β must be positive"));
        }
        if self.memory_size == 0 {
            return Err(Error::config("memory size must be positive"));
        }
        if self.large_batch == 0 || self.overlap_batch == 0 {
            return Err(Error::config("subsample parts N_S and N_O must be positive"));
        }
        if !(self.cautious_epsilon > 0.0) {
            return Err(Error::config("cautious epsilon must be positive"));
        }
        if !(self.shift >= 0.0) {
            return Err(Error::config("shift ρ must be nonnegative"));
        }
        Ok(())
    }

    /// Standard deviation `sqrt(2 h' γ' / β)` of each injected noise
    /// component; zero when `β = ∞`.
    pub fn noise_scale(&self) -> f64 {
        if self.inverse_temperature.is_infinite() {
            0.0
        } else {
            libm::sqrt(2.0 * self.step * self.friction / self.inverse_temperature)
        }
    }

    pub fn new_memory(&self, dim: usize) -> Result<LbfgsMemory> {
        LbfgsMemory::new(dim, self.memory_size, self.cautious_epsilon, self.shift)
    }
}

/// Maps the physical step `h` and friction `γ` to `(h', γ') = (h², hγ)`.
pub fn reparameterize(step: f64, friction: f64) -> Result<(f64, f64)> {
    if !(step > 0.0) || !(friction > 0.0) {
        return Err(Error::invalid("step and friction must be positive"));
    }
    let gamma = step * friction;
    if gamma >= 1.0 {
        return Err(Error::invalid("step * friction must be below 1"));
    }
    Ok((step * step, gamma))
}

/// The master's authoritative iterate, momentum and iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub theta: Vec<f64>,
    pub momentum: Vec<f64>,
    pub iteration: u64,
}

impl ParameterState {
    pub fn new(theta: Vec<f64>, momentum: Vec<f64>) -> Result<Self> {
        check_dim(theta.len(), momentum.len())?;
        if !all_finite(&theta) || !all_finite(&momentum) {
            return Err(Error::invalid("initial state must be finite"));
        }
        Ok(ParameterState { theta, momentum, iteration: 0 })
    }

    /// θ = θ₀, u = 0.
    pub fn at_rest(theta: Vec<f64>) -> Result<Self> {
        let d = theta.len();
        Self::new(theta, vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Increments shipped from a worker to the master.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector {
    pub d_theta: Vec<f64>,
    pub d_momentum: Vec<f64>,
    /// Master iteration of the snapshot the update was computed from.
    pub read_iteration: u64,
}

impl UpdateVector {
    /// `n_now - n_read`.
    pub fn staleness(&self, current_iteration: u64) -> u64 {
        current_iteration.saturating_sub(self.read_iteration)
    }
}

/// `θ_{n+1} = θ_n + Δθ`, `u_{n+1} = u_n + Δu`, `n ← n + 1`.
pub fn master_apply(state: &ParameterState, update: &UpdateVector) -> Result<ParameterState> {
    let mut next = state.clone();
    master_apply_in_place(&mut next, update)?;
    Ok(next)
}

/// In-place form of [`master_apply`]. On error `state` is left untouched.
pub fn master_apply_in_place(state: &mut ParameterState, update: &UpdateVector) -> Result<()> {
    check_dim(state.dim(), update.d_theta.len())?;
    check_dim(state.dim(), update.d_momentum.len())?;
    let finite = state
        .theta
        .iter()
        .zip(&update.d_theta)
        .chain(state.momentum.iter().zip(&update.d_momentum))
        .all(|(a, b)| (a + b).is_finite());
    if !finite {
        return Err(Error::Divergence {
            iteration: state.iteration + 1,
            quantity: "iterate",
        });
    }
    axpy(1.0, &update.d_theta, &mut state.theta);
    axpy(1.0, &update.d_momentum, &mut state.momentum);
    state.iteration += 1;
    Ok(())
}

/// Local variables a worker keeps between iterations for its memory update.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCurvatureSample {
    pub theta: Vec<f64>,
    pub overlap: Vec<usize>,
    pub overlap_gradient: Vec<f64>,
}

/// What a worker needs after sending to refresh its memory.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientContext {
    pub subsample: Subsample,
    pub theta: Vec<f64>,
    /// `∇Ũ_O(θ)` on the overlap part of `subsample`.
    pub overlap_gradient: Vec<f64>,
}

/// Per-worker as-L-BFGS state.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub memory: LbfgsMemory,
    pub previous: Option<LocalCurvatureSample>,
    pub local_index: u64,
}

impl WorkerState {
    pub fn new(cfg: &SamplerConfig, dim: usize) -> Result<Self> {
        Ok(WorkerState {
            memory: cfg.new_memory(dim)?,
            previous: None,
            local_index: 0,
        })
    }
}

fn divergence(iteration: u64, quantity: &'static str) -> Error {
    Error::Divergence { iteration, quantity }
}

/// One as-L-BFGS worker computation on the snapshot `(θ, u)`.
///
/// Draws `Ω = {S, O}`, forms the combined gradient and returns the update
/// with the context needed by [`post_send_memory_update`]. The memory is
/// read, not modified.
pub fn compute_update<M: Model, R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    worker: &WorkerState,
    snapshot: &ParameterState,
    model: &M,
    data: &Dataset<M::Record>,
    rng: &mut R,
) -> Result<(UpdateVector, GradientContext)> {
    check_dim(worker.memory.dim(), snapshot.dim())?;
    let omega = draw_subsample(rng, data.len(), cfg.large_batch, cfg.overlap_batch)?;
    let g = combined_gradient(model, data, &snapshot.theta, &omega)?;
    if !all_finite(&g) {
        return Err(divergence(snapshot.iteration, "gradient"));
    }
    let overlap_gradient = stochastic_gradient(model, data, &snapshot.theta, &omega.overlap)?;

    let d = snapshot.dim();
    let mut d_momentum = worker.memory.apply(&g)?;
    for (dm, u) in d_momentum.iter_mut().zip(&snapshot.momentum) {
        *dm = -cfg.step * *dm - cfg.friction * u;
    }
    let sigma = cfg.noise_scale();
    if sigma > 0.0 {
        let mut z = vec![0.0; d];
        fill_standard_normal(rng, &mut z);
        axpy(sigma, &z, &mut d_momentum);
    }
    let d_theta = worker.memory.apply(&snapshot.momentum)?;

    let update = UpdateVector {
        d_theta,
        d_momentum,
        read_iteration: snapshot.iteration,
    };
    let ctx = GradientContext {
        subsample: omega,
        theta: snapshot.theta.clone(),
        overlap_gradient,
    };
    Ok((update, ctx))
}

/// Worker-local memory refresh, run after the update has been sent.
///
/// With `θ̃_i` the snapshot just used and `Õ_{i-1}` the previous overlap
/// set, forms `s = θ̃_i - θ̃_{i-1}` and `y = ∇Ũ_{Õ_{i-1}}(θ̃_i) - g̃_{i-1}`,
/// so both gradients in `y` see the same indices. Returns whether the pair
/// was admitted.
pub fn post_send_memory_update<M: Model>(
    cfg: &SamplerConfig,
    worker: &mut WorkerState,
    ctx: GradientContext,
    model: &M,
    data: &Dataset<M::Record>,
) -> Result<bool> {
    let mut admitted = false;
    if let Some(prev) = &worker.previous {
        if cfg.curvature_updates {
            let g_prime = stochastic_gradient(model, data, &ctx.theta, &prev.overlap)?;
            let s: Vec<f64> = ctx.theta.iter().zip(&prev.theta).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_prime.iter().zip(&prev.overlap_gradient).map(|(a, b)| a - b).collect();
            admitted = worker.memory.try_add(&s, &y)?;
        }
    }
    worker.previous = Some(LocalCurvatureSample {
        theta: ctx.theta,
        overlap: ctx.subsample.overlap,
        overlap_gradient: ctx.overlap_gradient,
    });
    worker.local_index += 1;
    Ok(admitted)
}

/// `k` indices drawn uniformly with replacement from `[0, n)`.
pub fn draw_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Result<Vec<usize>> {
    if n == 0 || k == 0 {
        return Err(Error::invalid("need a nonempty dataset and batch"));
    }
    Ok((0..k).map(|_| rng.random_range(0..n)).collect())
}

/// One SGLD step `θ - h ∇Ũ_Ω(θ) + sqrt(2h/β) z`.
pub fn sgld_step<M: Model, R: Rng + ?Sized>(
    theta: &[f64],
    step: f64,
    inverse_temperature: f64,
    model: &M,
    data: &Dataset<M::Record>,
    indices: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut next = theta.to_vec();
    let inc = sgld_increment(theta, step, inverse_temperature, model, data, indices, rng)?;
    axpy(1.0, &inc, &mut next);
    if !all_finite(&next) {
        return Err(divergence(0, "iterate"));
    }
    Ok(next)
}

fn sgld_increment<M: Model, R: Rng + ?Sized>(
    theta: &[f64],
    step: f64,
    inverse_temperature: f64,
    model: &M,
    data: &Dataset<M::Record>,
    indices: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(inverse_temperature > 0.0) {
        return Err(Error::invalid("SGLD needs positive step and inverse temperature"));
    }
    let mut inc = stochastic_gradient(model, data, theta, indices)?;
    if !all_finite(&inc) {
        return Err(divergence(0, "gradient"));
    }
    for v in inc.iter_mut() {
        *v *= -step;
    }
    if inverse_temperature.is_finite() {
        let sigma = libm::sqrt(2.0 * step / inverse_temperature);
        let mut z = vec![0.0; theta.len()];
        fill_standard_normal(rng, &mut z);
        axpy(sigma, &z, &mut inc);
    }
    Ok(inc)
}

/// Asynchronous SGD increment `Δθ = -h ∇Ũ_Ω(θ_{n-l})`, `Δu = 0`.
pub fn asgd_step<M: Model>(
    snapshot: &ParameterState,
    step: f64,
    model: &M,
    data: &Dataset<M::Record>,
    indices: &[usize],
) -> Result<UpdateVector> {
    if !(step > 0.0) {
        return Err(Error::invalid("a-SGD step must be positive"));
    }
    let mut d_theta = stochastic_gradient(model, data, &snapshot.theta, indices)?;
    if !all_finite(&d_theta) {
        return Err(divergence(snapshot.iteration, "gradient"));
    }
    for v in d_theta.iter_mut() {
        *v *= -step;
    }
    Ok(UpdateVector {
        d_momentum: vec![0.0; d_theta.len()],
        d_theta,
        read_iteration: snapshot.iteration,
    })
}

/// A gradient delivered to the synchronous master within its timeout.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerGradient {
    pub gradient: Vec<f64>,
    /// Aggregation weight, the worker's `N_Ω`.
    pub weight: f64,
    /// Overlap indices the worker drew this round.
    pub overlap: Vec<usize>,
}

/// Central bookkeeping of the synchronous baseline between rounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MbOverlapState {
    previous: Option<LocalCurvatureSample>,
}

/// One round of the simplified synchronous multi-batch L-BFGS master.
///
/// 1. The pair from the previous round is formed on that round's pooled
///    overlap set: `s = θ - θ_prev`, `y = ∇Ũ_O(θ) - ∇Ũ_O(θ_prev)`, and
///    offered to the central memory under the cautious rule.
/// 2. The received gradients are averaged with their weights and the
///    step `θ' = θ - h (H + ρI) ḡ` is taken.
/// 3. The pooled overlap set of this round and its gradient at θ are kept
///    for the next round.
///
/// A round with no gradients leaves θ and the bookkeeping unchanged.
pub fn mb_lbfgs_round<M: Model>(
    memory: &mut LbfgsMemory,
    bookkeeping: &mut MbOverlapState,
    theta: &[f64],
    step: f64,
    received: &[WorkerGradient],
    model: &M,
    data: &Dataset<M::Record>,
) -> Result<Vec<f64>> {
    check_dim(memory.dim(), theta.len())?;
    if received.is_empty() {
        return Ok(theta.to_vec());
    }
    let total: f64 = received.iter().map(|w| w.weight).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("aggregation weights must be positive"));
    }
    let mut mean = vec![0.0; theta.len()];
    for w in received {
        check_dim(theta.len(), w.gradient.len())?;
        axpy(w.weight / total, &w.gradient, &mut mean);
    }
    if !all_finite(&mean) {
        return Err(divergence(0, "gradient"));
    }

    if let Some(prev) = &bookkeeping.previous {
        let g_now = stochastic_gradient(model, data, theta, &prev.overlap)?;
        let s: Vec<f64> = theta.iter().zip(&prev.theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_now.iter().zip(&prev.overlap_gradient).map(|(a, b)| a - b).collect();
        memory.try_add(&s, &y)?;
    }

    let direction = memory.apply(&mean)?;
    let mut next = theta.to_vec();
    axpy(-step, &direction, &mut next);
    if !all_finite(&next) {
        return Err(divergence(0, "iterate"));
    }

    let overlap: Vec<usize> = received.iter().flat_map(|w| w.overlap.iter().copied()).collect();
    bookkeeping.previous = if overlap.is_empty() {
        None
    } else {
        Some(LocalCurvatureSample {
            overlap_gradient: stochastic_gradient(model, data, theta, &overlap)?,
            theta: theta.to_vec(),
            overlap,
        })
    };
    Ok(next)
}

/// Hyperparameters of the asynchronous SGD baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct AsgdConfig {
    pub step: f64,
    pub batch: usize,
    /// With `Some(γ')`, the baseline keeps a momentum:
    /// `Δu = -h g - γ' u`, `Δθ = u`.
    pub friction: Option<f64>,
}

/// Hyperparameters of (asynchronous) SGLD.
#[derive(Debug, Clone, PartialEq)]
pub struct SgldConfig {
    pub step: f64,
    pub inverse_temperature: f64,
    pub batch: usize,
}

/// Update rule a worker runs in an asynchronous master/worker loop.
#[derive(Debug, Clone, PartialEq)]
pub enum AsyncRule {
    AsLbfgs(SamplerConfig),
    Asgd(AsgdConfig),
    Sgld(SgldConfig),
}

impl AsyncRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            AsyncRule::AsLbfgs(cfg) => cfg.validate(),
            AsyncRule::Asgd(cfg) => {
                if !(cfg.step > 0.0) || cfg.batch == 0 {
                    return Err(Error::config("a-SGD needs a positive step and batch"));
                }
                match cfg.friction {
                    Some(f) if !(f > 0.0 && f < 1.0) => Err(Error::config("a-SGD friction must lie in (0, 1)")),
                    _ => Ok(()),
                }
            }
            AsyncRule::Sgld(cfg) => {
                if !(cfg.step > 0.0) || !(cfg.inverse_temperature > 0.0) || cfg.batch == 0 {
                    return Err(Error::config("SGLD needs positive step, temperature and batch"));
                }
                Ok(())
            }
        }
    }
}

/// A worker of an asynchronous run: its rule, private random stream and
/// (for as-L-BFGS) local memory.
#[derive(Debug, Clone)]
pub struct AsyncWorker {
    rule: AsyncRule,
    rng: Stream,
    lbfgs: Option<WorkerState>,
    pending: Option<GradientContext>,
}

impl AsyncWorker {
    pub fn new(rule: AsyncRule, dim: usize, rng: Stream) -> Result<Self> {
        rule.validate()?;
        let lbfgs = match &rule {
            AsyncRule::AsLbfgs(cfg) => Some(WorkerState::new(cfg, dim)?),
            _ => None,
        };
        Ok(AsyncWorker { rule, rng, lbfgs, pending: None })
    }

    pub fn state(&self) -> Option<&WorkerState> {
        self.lbfgs.as_ref()
    }

    /// Computes the increment for `snapshot`.
    pub fn compute<M: Model>(
        &mut self,
        snapshot: &ParameterState,
        model: &M,
        data: &Dataset<M::Record>,
    ) -> Result<UpdateVector> {
        match &self.rule {
            AsyncRule::AsLbfgs(cfg) => {
                let worker = self.lbfgs.as_ref().expect("as-L-BFGS worker state");
                let (update, ctx) = compute_update(cfg, worker, snapshot, model, data, &mut self.rng)?;
                self.pending = Some(ctx);
                Ok(update)
            }
            AsyncRule::Asgd(cfg) => {
                let idx = draw_indices(&mut self.rng, data.len(), cfg.batch)?;
                let mut update = asgd_step(snapshot, cfg.step, model, data, &idx)?;
                if let Some(friction) = cfg.friction {
                    for ((dm, dt), u) in update.d_momentum.iter_mut().zip(update.d_theta.iter_mut()).zip(&snapshot.momentum) {
                        *dm = *dt - friction * u;
                        *dt = *u;
                    }
                }
                Ok(update)
            }
            AsyncRule::Sgld(cfg) => {
                let idx = draw_indices(&mut self.rng, data.len(), cfg.batch)?;
                let d_theta = sgld_increment(&snapshot.theta, cfg.step, cfg.inverse_temperature, model, data, &idx, &mut self.rng)
                    .map_err(|e| match e {
                        Error::Divergence { quantity, .. } => divergence(snapshot.iteration, quantity),
                        other => other,
                    })?;
                Ok(UpdateVector {
                    d_momentum: vec![0.0; d_theta.len()],
                    d_theta,
                    read_iteration: snapshot.iteration,
                })
            }
        }
    }

    /// Work done after the send; refreshes the local memory for as-L-BFGS.
    pub fn after_send<M: Model>(&mut self, model: &M, data: &Dataset<M::Record>) -> Result<bool> {
        match (&self.rule, self.lbfgs.as_mut(), self.pending.take()) {
            (AsyncRule::AsLbfgs(cfg), Some(worker), Some(ctx)) => post_send_memory_update(cfg, worker, ctx, model, data),
            _ => Ok(false),
        }
    }
}
