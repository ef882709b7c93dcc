//! Experiment configuration.
//!
//! A config is a JSON document with a `schema` version. When it names a
//! `preset`, the document is merged over that preset key by key (objects
//! merge recursively, everything else replaces; a `problem` of a different
//! `kind` replaces the preset's problem wholesale), so a config only has to
//! state what differs. Unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use asqn_core::sampler::{AsgdConfig, AsyncRule, SamplerConfig, SgldConfig};
use asqn_core::simulator::{MbConfig, SimConfig, SpeedModel};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::movielens::RatingsFormat;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Run,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "as-lbfgs")]
    AsLbfgs,
    #[serde(rename = "a-sgd")]
    Asgd,
    #[serde(rename = "mb-lbfgs-simplified")]
    MbLbfgs,
    #[serde(rename = "sgld")]
    Sgld,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::AsLbfgs => "as-lbfgs",
            Algorithm::Asgd => "a-sgd",
            Algorithm::MbLbfgs => "mb-lbfgs-simplified",
            Algorithm::Sgld => "sgld",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    LinearGaussian {
        seed: u64,
        dim: usize,
        records: usize,
        noise_variance: f64,
        /// Weight of the shared low-rank feature component, in [0, 1).
        correlation: f64,
    },
    SyntheticFactorization {
        seed: u64,
        rows: usize,
        cols: usize,
        true_rank: usize,
        rank: usize,
        noise_std: f64,
        observed: f64,
    },
    Movielens {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        format: Option<RatingsFormat>,
        rank: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cap: Option<usize>,
        seed: u64,
    },
}

/// Subsample sizes. `N_Ω = round(fraction · N_Y)` unless `subsample` is
/// given, `N_O = round(overlap_ratio · N_Ω)` unless `overlap` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub subsample_fraction: f64,
    pub overlap_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<usize>,
}

impl BatchConfig {
    /// `(N_S, N_O)` for a dataset of `records` points.
    pub fn resolve(&self, records: usize) -> (usize, usize) {
        let total = self
            .subsample
            .unwrap_or_else(|| (self.subsample_fraction * records as f64).round() as usize)
            .max(2);
        let overlap = self
            .overlap
            .unwrap_or_else(|| (self.overlap_ratio * total as f64).round() as usize)
            .clamp(1, total - 1);
        (total - overlap, overlap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsLbfgsSection {
    /// `h'`
    pub step: f64,
    /// `γ'`
    pub friction: f64,
    /// `β`; `null` means infinite (no injected noise).
    pub inverse_temperature: Option<f64>,
    pub memory_size: usize,
    pub cautious_epsilon: f64,
    /// ρ
    pub shift: f64,
    pub curvature_updates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsgdSection {
    pub step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbSection {
    pub step: f64,
    pub memory_size: usize,
    pub cautious_epsilon: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldSection {
    pub step: f64,
    pub inverse_temperature: f64,
}

/// Master and worker mean times of one algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub master_time: f64,
    pub worker_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingTable {
    #[serde(rename = "as-lbfgs")]
    pub as_lbfgs: Timing,
    #[serde(rename = "a-sgd")]
    pub a_sgd: Timing,
    #[serde(rename = "mb-lbfgs-simplified")]
    pub mb_lbfgs: Timing,
    pub sgld: Timing,
}

impl TimingTable {
    pub fn get(&self, algo: Algorithm) -> Timing {
        match algo {
            Algorithm::AsLbfgs => self.as_lbfgs,
            Algorithm::Asgd => self.a_sgd,
            Algorithm::MbLbfgs => self.mb_lbfgs,
            Algorithm::Sgld => self.sgld,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSection {
    pub workers: usize,
    /// τ
    pub comm_time: f64,
    /// σ_w (standard deviation)
    pub worker_time_std: f64,
    /// T_mb
    pub round_timeout: f64,
    pub max_time: f64,
    pub max_iterations: u64,
    pub record_every: u64,
    pub per_worker_speed: bool,
    pub timing: TimingTable,
}

impl SimulatorSection {
    pub fn sim_config(&self, algo: Algorithm, seed: u64) -> SimConfig {
        let t = self.timing.get(algo);
        SimConfig {
            workers: self.workers,
            master_time: t.master_time,
            worker_time: t.worker_time,
            worker_time_std: self.worker_time_std,
            comm_time: self.comm_time,
            round_timeout: self.round_timeout,
            max_time: self.max_time,
            max_iterations: self.max_iterations,
            record_every: self.record_every,
            speed_model: if self.per_worker_speed { SpeedModel::PerWorker } else { SpeedModel::PerDraw },
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSection {
    pub workers: usize,
    pub max_iterations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_wall_ms: Option<u64>,
    pub record_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staleness_bound: Option<u64>,
}

/// Values swept over; an empty list keeps the base setting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub worker_time_std: Vec<f64>,
    #[serde(default)]
    pub workers: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    /// Relative accuracy ε for `time_to_epsilon` (needs a known optimum).
    pub epsilon: f64,
    /// Stop a run as soon as the target is reached.
    pub stop_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub mode: Mode,
    pub problem: ProblemConfig,
    pub algorithms: Vec<Algorithm>,
    pub batch: BatchConfig,
    pub as_lbfgs: AsLbfgsSection,
    pub a_sgd: AsgdSection,
    pub mb_lbfgs: MbSection,
    pub sgld: SgldSection,
    pub simulator: SimulatorSection,
    pub runtime: RuntimeSection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub repetitions: usize,
    pub seed: u64,
    /// Standard deviation of the random initial θ; 0 starts at the origin.
    pub init_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSection>,
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn sampler_config(&self, records: usize) -> SamplerConfig {
        let (large, overlap) = self.batch.resolve(records);
        let s = &self.as_lbfgs;
        SamplerConfig {
            step: s.step,
            friction: s.friction,
            inverse_temperature: s.inverse_temperature.unwrap_or(f64::INFINITY),
            memory_size: s.memory_size,
            large_batch: large,
            overlap_batch: overlap,
            cautious_epsilon: s.cautious_epsilon,
            shift: s.shift,
            curvature_updates: s.curvature_updates,
        }
    }

    pub fn mb_config(&self, records: usize) -> MbConfig {
        let (large, overlap) = self.batch.resolve(records);
        MbConfig {
            step: self.mb_lbfgs.step,
            memory_size: self.mb_lbfgs.memory_size,
            cautious_epsilon: self.mb_lbfgs.cautious_epsilon,
            shift: self.mb_lbfgs.shift,
            large_batch: large,
            overlap_batch: overlap,
        }
    }

    /// The asynchronous rule for `algo`; `None` for the synchronous
    /// baseline.
    pub fn async_rule(&self, algo: Algorithm, records: usize) -> Option<AsyncRule> {
        let (large, overlap) = self.batch.resolve(records);
        match algo {
            Algorithm::AsLbfgs => Some(AsyncRule::AsLbfgs(self.sampler_config(records))),
            Algorithm::Asgd => Some(AsyncRule::Asgd(AsgdConfig {
                step: self.a_sgd.step,
                batch: large + overlap,
                friction: self.a_sgd.friction,
            })),
            Algorithm::Sgld => Some(AsyncRule::Sgld(SgldConfig {
                step: self.sgld.step,
                inverse_temperature: self.sgld.inverse_temperature,
                batch: large + overlap,
            })),
            Algorithm::MbLbfgs => None,
        }
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |path: &str, message: String| Err(ConfigError::at(path, message));
        if self.schema != SCHEMA_VERSION {
            return fail("schema", format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema));
        }
        if self.algorithms.is_empty() {
            return fail("algorithms", "at least one algorithm is required".into());
        }
        if self.repetitions == 0 {
            return fail("repetitions", "must be positive".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return fail("init_scale", "must be finite and nonnegative".into());
        }
        if self.mode == Mode::Run && self.algorithms.contains(&Algorithm::MbLbfgs) {
            return fail("algorithms", "mb-lbfgs-simplified is only available in simulate mode".into());
        }
        let b = &self.batch;
        if !(b.subsample_fraction > 0.0 && b.subsample_fraction <= 1.0) || !(b.overlap_ratio > 0.0 && b.overlap_ratio < 1.0) {
            return fail("batch", "need subsample_fraction in (0, 1] and overlap_ratio in (0, 1)".into());
        }
        if let (Some(total), Some(overlap)) = (b.subsample, b.overlap) {
            if overlap == 0 || overlap >= total {
                return fail("batch.overlap", "must lie in [1, subsample)".into());
            }
        }
        match &self.problem {
            ProblemConfig::LinearGaussian { dim, records, noise_variance, correlation, .. } => {
                if *dim == 0 || *records == 0 || !(*noise_variance > 0.0) || !(0.0..1.0).contains(correlation) {
                    return fail("problem", "need dim, records > 0, noise_variance > 0 and correlation in [0, 1)".into());
                }
            }
            ProblemConfig::SyntheticFactorization { rows, cols, true_rank, rank, observed, .. } => {
                if *rows == 0 || *cols == 0 || *true_rank == 0 || *rank == 0 || !(*observed > 0.0 && *observed <= 1.0) {
                    return fail("problem", "need positive sizes and observed in (0, 1]".into());
                }
            }
            ProblemConfig::Movielens { path, rank, .. } => {
                if !path.exists() {
                    return fail("problem.path", format!("{} does not exist", path.display()));
                }
                if *rank == 0 {
                    return fail("problem.rank", "must be positive".into());
                }
            }
        }
        let records = 1000;
        self.sampler_config(records).validate().or_else(|e| fail("as_lbfgs", e.to_string()))?;
        self.mb_config(records).validate().or_else(|e| fail("mb_lbfgs", e.to_string()))?;
        for algo in [Algorithm::Asgd, Algorithm::Sgld] {
            if let Some(rule) = self.async_rule(algo, records) {
                rule.validate().or_else(|e| fail(algo.name(), e.to_string()))?;
            }
        }
        self.simulator
            .sim_config(Algorithm::AsLbfgs, 0)
            .validate()
            .or_else(|e| fail("simulator", e.to_string()))?;
        for algo in self.algorithms.iter().copied() {
            let t = self.simulator.timing.get(algo);
            if !(t.master_time >= 0.0 && t.worker_time >= 0.0) {
                return fail("simulator.timing", format!("{algo} times must be nonnegative"));
            }
        }
        let r = &self.runtime;
        if r.workers == 0 || r.max_iterations == 0 || r.record_every == 0 {
            return fail("runtime", "workers, max_iterations and record_every must be positive".into());
        }
        if self.sweep.worker_time_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return fail("sweep.worker_time_std", "values must be finite and nonnegative".into());
        }
        if self.sweep.workers.contains(&0) {
            return fail("sweep.workers", "values must be positive".into());
        }
        if let Some(t) = self.target {
            if !(t.epsilon > 0.0) {
                return fail("target.epsilon", "must be positive".into());
            }
        }
        Ok(())
    }
}

/// A configuration problem, located by JSON path and, when it can be
/// found in the source text, line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(path: &str, message: String) -> Self {
        ConfigError { path: Some(path.to_string()), line: None, message }
    }

    fn plain(message: impl Into<String>) -> Self {
        ConfigError { path: None, line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error")?;
        if let Some(p) = &self.path {
            write!(f, " at {p}")?;
        }
        if let Some(l) = self.line {
            write!(f, " (line {l})")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

pub const PRESETS: [&str; 2] = ["linear-gaussian-paper", "ml-1m-paper"];

/// The built-in preset documents. Step sizes, friction and temperatures
/// are the published settings; problem sizes are desk-scale choices.
pub fn preset(name: &str) -> Option<Value> {
    match name {
        "linear-gaussian-paper" => Some(json!({
            "schema": SCHEMA_VERSION,
            "mode": "simulate",
            "problem": {
                "kind": "linear-gaussian",
                "seed": 1,
                "dim": 100,
                "records": 600,
                "noise_variance": 10.0,
                "correlation": 0.9
            },
            "algorithms": ["as-lbfgs", "a-sgd", "mb-lbfgs-simplified"],
            "batch": { "subsample_fraction": 0.01, "overlap_ratio": 1.0 / 3.0 },
            "as_lbfgs": {
                "step": 4e-4,
                "friction": 3e-2,
                "inverse_temperature": 5e2,
                "memory_size": 3,
                "cautious_epsilon": 1e-8,
                "shift": 0.0,
                "curvature_updates": true
            },
            "a_sgd": { "step": 1e-3 },
            "mb_lbfgs": { "step": 5e-2, "memory_size": 3, "cautious_epsilon": 1e-8, "shift": 0.0 },
            "sgld": { "step": 1e-3, "inverse_temperature": 5e2 },
            "simulator": {
                "workers": 40,
                "comm_time": 10.0,
                "worker_time_std": 0.0,
                "round_timeout": 10.0,
                "max_time": 1.0e6,
                "max_iterations": 2_000_000,
                "record_every": 10,
                "per_worker_speed": false,
                "timing": {
                    "as-lbfgs": { "master_time": 0.0, "worker_time": 70.0 },
                    "a-sgd": { "master_time": 0.0, "worker_time": 10.0 },
                    "mb-lbfgs-simplified": { "master_time": 30.0, "worker_time": 10.0 },
                    "sgld": { "master_time": 0.0, "worker_time": 10.0 }
                }
            },
            "runtime": { "workers": 4, "max_iterations": 200_000, "record_every": 100 },
            "sweep": { "worker_time_std": [], "workers": [] },
            "repetitions": 10,
            "seed": 0,
            "init_scale": 1.0,
            "target": { "epsilon": 1e-2, "stop_early": true },
            "output": "out"
        })),
        "ml-1m-paper" => Some(json!({
            "schema": SCHEMA_VERSION,
            "mode": "run",
            "problem": {
                "kind": "movielens",
                "path": "ml-1m/ratings.dat",
                "format": "dat-double-colon",
                "rank": 5,
                "cap": 100_000,
                "seed": 1
            },
            "algorithms": ["as-lbfgs", "a-sgd"],
            "batch": { "subsample_fraction": 0.01, "overlap_ratio": 1.0 / 3.0 },
            "as_lbfgs": {
                "step": 2e-8,
                "friction": 1e-1,
                "inverse_temperature": 1e3,
                "memory_size": 3,
                "cautious_epsilon": 0.5,
                "shift": 3.0,
                "curvature_updates": true
            },
            "a_sgd": { "step": 1e-6 },
            "mb_lbfgs": { "step": 5e-7, "memory_size": 3, "cautious_epsilon": 0.5, "shift": 3.0 },
            "sgld": { "step": 1e-6, "inverse_temperature": 1e3 },
            "simulator": {
                "workers": 40,
                "comm_time": 10.0,
                "worker_time_std": 0.0,
                "round_timeout": 400.0,
                "max_time": 1.0e7,
                "max_iterations": 50_000,
                "record_every": 100,
                "per_worker_speed": false,
                "timing": {
                    "as-lbfgs": { "master_time": 0.0, "worker_time": 70.0 },
                    "a-sgd": { "master_time": 0.0, "worker_time": 10.0 },
                    "mb-lbfgs-simplified": { "master_time": 30.0, "worker_time": 10.0 },
                    "sgld": { "master_time": 0.0, "worker_time": 10.0 }
                }
            },
            "runtime": { "workers": 4, "max_iterations": 50_000, "record_every": 500 },
            "sweep": { "worker_time_std": [], "workers": [] },
            "repetitions": 1,
            "seed": 0,
            "init_scale": 0.1,
            "output": "out"
        })),
        _ => None,
    }
}

/// Recursive object merge of `patch` into `base`.
pub fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let kind_changes = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changes {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// 1-based line of the first `"key"` occurrence in `text`.
fn find_key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn locate(text: &str, err: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let path = err.path().to_string();
    let message = err.inner().to_string();
    // unknown keys name themselves in the message; other errors point at
    // the last path segment
    let key = message
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next())
        .map(str::to_string)
        .or_else(|| path.rsplit('.').next().map(|s| s.trim_end_matches(|c: char| c == ']' || c.is_ascii_digit()).trim_end_matches('[').to_string()));
    let line = key.filter(|k| !k.is_empty() && k != ".").and_then(|k| find_key_line(text, &k));
    ConfigError { path: Some(path), line, message }
}

/// Parses a config document. Relative paths inside it are resolved
/// against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig, ConfigError> {
    if text.trim().is_empty() {
        return Err(ConfigError::plain("empty configuration"));
    }
    let user: Value = serde_json::from_str(text).map_err(|e| ConfigError {
        path: None,
        line: Some(e.line()),
        message: e.to_string(),
    })?;
    let Value::Object(obj) = &user else {
        return Err(ConfigError::plain("configuration must be a JSON object"));
    };
    let merged = match obj.get("preset") {
        None | Some(Value::Null) => user,
        Some(Value::String(name)) => {
            let mut base = preset(name).ok_or_else(|| ConfigError {
                path: Some("preset".into()),
                line: find_key_line(text, "preset"),
                message: format!("unknown preset {name:?} (known: {})", PRESETS.join(", ")),
            })?;
            deep_merge(&mut base, user);
            base
        }
        Some(_) => return Err(ConfigError::plain("preset must be a string")),
    };
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| locate(text, e))?;
    if let ProblemConfig::Movielens { path, .. } = &mut cfg.problem {
        if path.is_relative() {
            *path = base_dir.join(&*path);
        }
    }
    cfg.validate().map_err(|mut e| {
        if let Some(p) = &e.path {
            e.line = p.rsplit('.').next().and_then(|k| find_key_line(text, k));
        }
        e
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::plain(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        parse_config(text, Path::new("."))
    }

    #[test]
    fn linear_gaussian_preset() {
        let cfg = parse(r#"{"preset": "linear-gaussian-paper"}"#).unwrap();
        assert_eq!(cfg.as_lbfgs.step, 4e-4);
        assert_eq!(cfg.as_lbfgs.friction, 3e-2);
        assert_eq!(cfg.as_lbfgs.inverse_temperature, Some(5e2));
        assert_eq!(cfg.as_lbfgs.memory_size, 3);
        assert_eq!(cfg.simulator.comm_time, 10.0);
        assert_eq!(cfg.batch.resolve(600), (4, 2));
        let s = cfg.sampler_config(600);
        assert_eq!((s.large_batch + s.overlap_batch, s.overlap_batch), (6, 2));
        assert_eq!(cfg.simulator.timing.as_lbfgs.worker_time, 70.0);
        assert_eq!(cfg.simulator.timing.mb_lbfgs.master_time, 30.0);
    }

    #[test]
    fn ml_1m_preset() {
        let dir = std::env::temp_dir().join("asqn-config-ml-preset");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("ratings.dat"), "1::1::5::0\n").unwrap();
        let cfg = parse_config(r#"{"preset": "ml-1m-paper", "problem": {"path": "ratings.dat"}}"#, &dir).unwrap();
        assert_eq!(cfg.as_lbfgs.step, 2e-8);
        assert_eq!(cfg.as_lbfgs.friction, 1e-1);
        assert_eq!(cfg.as_lbfgs.inverse_temperature, Some(1e3));
        assert_eq!(cfg.as_lbfgs.shift, 3.0);
        assert!(matches!(&cfg.problem, ProblemConfig::Movielens { path, rank: 5, .. } if path == &dir.join("ratings.dat")));
    }

    #[test]
    fn overrides_merge() {
        let cfg = parse(r#"{"preset": "linear-gaussian-paper", "as_lbfgs": {"shift": 0.5}, "simulator": {"workers": 3}}"#).unwrap();
        assert_eq!(cfg.as_lbfgs.shift, 0.5);
        assert_eq!(cfg.as_lbfgs.step, 4e-4);
        assert_eq!(cfg.simulator.workers, 3);
        assert_eq!(cfg.simulator.comm_time, 10.0);
    }

    #[test]
    fn problem_kind_replaces() {
        let cfg = parse(
            r#"{"preset": "linear-gaussian-paper",
                "problem": {"kind": "synthetic-factorization", "seed": 2, "rows": 20, "cols": 30,
                            "true_rank": 3, "rank": 3, "noise_std": 0.1, "observed": 0.2}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.problem, ProblemConfig::SyntheticFactorization { rows: 20, .. }));
    }

    #[test]
    fn empty_and_malformed() {
        assert!(parse("").is_err());
        assert!(parse("   \n").is_err());
        let e = parse("{\n  \"preset\": \"linear-gaussian-paper\",\n  \"seed\": \n}").unwrap_err();
        assert_eq!(e.line, Some(4));
    }

    #[test]
    fn unknown_key_has_path_and_line() {
        let text = "{\n  \"preset\": \"linear-gaussian-paper\",\n  \"as_lbfgs\": {\n    \"stepp\": 1.0\n  }\n}";
        let e = parse(text).unwrap_err();
        assert_eq!(e.path.as_deref(), Some("as_lbfgs.stepp"));
        assert_eq!(e.line, Some(4));
        assert!(e.message.contains("stepp"));
    }

    #[test]
    fn schema_violations() {
        let e = parse(r#"{"preset": "linear-gaussian-paper", "as_lbfgs": {"memory_size": "three"}}"#).unwrap_err();
        assert_eq!(e.path.as_deref(), Some("as_lbfgs.memory_size"));
        let e = parse(r#"{"preset": "linear-gaussian-paper", "as_lbfgs": {"friction": 1.5}}"#).unwrap_err();
        assert_eq!(e.path.as_deref(), Some("as_lbfgs"));
        let e = parse(r#"{"preset": "nope"}"#).unwrap_err();
        assert_eq!(e.path.as_deref(), Some("preset"));
        assert!(parse(r#"{"preset": "linear-gaussian-paper", "schema": 2}"#).is_err());
        assert!(parse(r#"{"preset": "linear-gaussian-paper", "mode": "run"}"#).is_err());
        assert!(parse(r#"{"preset": "ml-1m-paper", "problem": {"path": "/no/such/file"}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = parse(r#"{"preset": "linear-gaussian-paper", "sweep": {"worker_time_std": [0, 50]}}"#).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
        let mut bare = cfg.clone();
        bare.preset = None;
        let text = serde_json::to_string(&bare).unwrap();
        assert_eq!(parse(&text).unwrap(), bare);
    }
}
