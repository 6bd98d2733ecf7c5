//! Experiment configuration as a flat `key = value` document.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::DetectorConfig;
use crate::interventions::{Condition, InterventionSpec};
use crate::probes::DefectProbeConfig;
use crate::tasks::DyckConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GROKWATCH_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got {content:?}")]
    Syntax { line: usize, content: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Dyck,
    Scan,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Dyck => "dyck",
            Task::Scan => "scan",
        }
    }
}

/// Optional replacements for the task's preset architecture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub init_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub dyck: DyckConfig,
    /// SCAN source file; the built-in grammar is used when absent.
    pub scan_path: Option<PathBuf>,
    pub scan_n_train: usize,
    pub scan_data_seed: u64,
    /// Evaluate on only the first `test_limit` test examples (0 = all).
    pub test_limit: usize,
    pub model: ModelOverrides,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// 0 picks the learning-rate dependent budget.
    pub max_steps: u64,
    pub seeds: Vec<u64>,
    /// 0 trains on the full training set every step.
    pub batch_size: usize,
    pub eval_interval: u64,
    /// `(until, every)` windows in which evaluations, probes and samples
    /// also run every `every` steps, written `until:every,...`.
    pub dense: Vec<(u64, u64)>,
    pub snapshot_interval: u64,
    pub checkpoint_interval: u64,
    /// `probe.interval == 0` picks the learning-rate dependent cadence.
    pub probe: DefectProbeConfig,
    /// Commutator vectors stored per probe step for the integrability analysis.
    pub sample_deltas: usize,
    pub early_stop: bool,
    pub early_stop_margin: u64,
    pub detector: DetectorConfig,
    pub intervention: InterventionSpec,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::dyck()
    }
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Training budget by learning rate.
pub fn default_max_steps(task: Task, lr: f64) -> u64 {
    let table: &[(f64, u64)] = match task {
        Task::Dyck => &[(1e-2, 20_000), (3e-3, 30_000), (1e-3, 50_000), (5e-4, 80_000), (1e-4, 200_000)],
        Task::Scan => &[(1e-3, 20_000), (5e-4, 40_000), (1e-4, 100_000), (5e-5, 150_000)],
    };
    let last = match task {
        Task::Dyck => 300_000,
        Task::Scan => 200_000,
    };
    table.iter().find(|(threshold, _)| lr >= threshold * 0.999).map_or(last, |e| e.1)
}

impl ExperimentConfig {
    pub fn dyck() -> Self {
        ExperimentConfig {
            task: Task::Dyck,
            dyck: DyckConfig::default(),
            scan_path: None,
            scan_n_train: 2048,
            scan_data_seed: 0,
            test_limit: 0,
            model: ModelOverrides::default(),
            lr: 1e-3,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: 1.0,
            max_steps: 0,
            seeds: vec![42, 137, 2024],
            batch_size: 0,
            eval_interval: 100,
            dense: vec![(20, 5), (200, 20)],
            snapshot_interval: 200,
            checkpoint_interval: 1000,
            probe: DefectProbeConfig { interval: 0, ..DefectProbeConfig::dyck() },
            sample_deltas: 2,
            early_stop: true,
            early_stop_margin: 2000,
            detector: DetectorConfig::default(),
            intervention: InterventionSpec::default(),
            output_dir: default_output_dir(),
        }
    }

    pub fn scan() -> Self {
        ExperimentConfig {
            task: Task::Scan,
            lr: 1e-4,
            batch_size: 128,
            probe: DefectProbeConfig { interval: 0, ..DefectProbeConfig::scan() },
            ..ExperimentConfig::dyck()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Dyck => Self::dyck(),
            Task::Scan => Self::scan(),
        }
    }

    pub fn max_steps(&self) -> u64 {
        if self.max_steps == 0 {
            default_max_steps(self.task, self.lr)
        } else {
            self.max_steps
        }
    }

    pub fn probe_interval(&self) -> u64 {
        if self.probe.interval == 0 {
            DefectProbeConfig::interval_for_lr(self.lr)
        } else {
            self.probe.interval
        }
    }

    /// Probe configuration with the cadence resolved.
    pub fn resolved_probe(&self) -> DefectProbeConfig {
        DefectProbeConfig { interval: self.probe_interval(), ..self.probe.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.max_steps() == 0 {
            return bad("max_steps must be positive".into());
        }
        for (name, v) in [
            ("eval_interval", self.eval_interval),
            ("snapshot_interval", self.snapshot_interval),
            ("checkpoint_interval", self.checkpoint_interval),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.dense.iter().any(|&(_, every)| every == 0) {
            return bad("dense windows need a positive interval".into());
        }
        self.resolved_probe().validate().map_err(ConfigError::Invalid)?;
        self.intervention.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Every key in canonical order with its current value.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let i = &self.intervention;
        vec![
            ("task", self.task.as_str().into()),
            ("seq_len", self.dyck.seq_len.to_string()),
            ("max_depth", self.dyck.max_depth.to_string()),
            ("n_train", self.dyck.n_train.to_string()),
            ("n_test", self.dyck.n_test.to_string()),
            ("data_seed", self.dyck.seed.to_string()),
            ("scan_path", opt(self.scan_path.as_ref().map(|p| p.display().to_string()))),
            ("scan_n_train", self.scan_n_train.to_string()),
            ("scan_data_seed", self.scan_data_seed.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("d_model", opt(self.model.d_model.map(|v| v.to_string()))),
            ("n_layers", opt(self.model.n_layers.map(|v| v.to_string()))),
            ("n_heads", opt(self.model.n_heads.map(|v| v.to_string()))),
            ("d_ff", opt(self.model.d_ff.map(|v| v.to_string()))),
            ("init_scale", opt(self.model.init_scale.map(|v| v.to_string()))),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            ("batch_size", self.batch_size.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("dense", self.dense.iter().map(|(u, e)| format!("{u}:{e}")).collect::<Vec<_>>().join(",")),
            ("snapshot_interval", self.snapshot_interval.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("probe_eta", self.probe.eta.to_string()),
            ("probe_k", self.probe.k_meas.to_string()),
            ("probe_batch", self.probe.batch_size.to_string()),
            ("probe_floor", self.probe.floor.to_string()),
            ("probe_target", self.probe.target.to_string()),
            ("probe_interval", self.probe.interval.to_string()),
            ("sample_deltas", self.sample_deltas.to_string()),
            ("early_stop", self.early_stop.to_string()),
            ("early_stop_margin", self.early_stop_margin.to_string()),
            ("grok_threshold", self.detector.threshold.to_string()),
            ("grok_sustained", self.detector.n_sustained.to_string()),
            ("onset_multiplier", self.detector.onset_multiplier.to_string()),
            ("onset_floor", self.detector.onset_floor.to_string()),
            ("onset_window", self.detector.baseline_window.to_string()),
            ("condition", i.condition.as_str().into()),
            ("strength", i.strength.to_string()),
            ("trigger", opt(i.trigger.map(|v| v.to_string()))),
            ("noise_period", i.period.to_string()),
            ("basis_source", opt(i.basis_source.as_ref().map(|p| p.display().to_string()))),
            ("basis_rank", i.basis_rank.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        ExperimentConfig::dyck().to_pairs().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key. Changing `task` does not reset other keys; use
    /// [`ExperimentConfig::from_pairs`] to start from the task's preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let err = |reason: String| ConfigError::BadValue { key: key.into(), value: value.into(), reason };
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        fn opt<T: std::str::FromStr>(v: &str) -> Result<Option<T>, String>
        where
            T::Err: std::fmt::Display,
        {
            if v.is_empty() || v == "none" {
                Ok(None)
            } else {
                num(v).map(Some)
            }
        }
        fn boolean(v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err("expected a boolean".into()),
            }
        }
        let path = |v: &str| if v.is_empty() || v == "none" { None } else { Some(PathBuf::from(v)) };
        let r: Result<(), String> = (|| {
            match key {
                "task" => {
                    self.task = match value {
                        "dyck" => Task::Dyck,
                        "scan" => Task::Scan,
                        _ => return Err("expected dyck or scan".into()),
                    }
                }
                "seq_len" => self.dyck.seq_len = num(value)?,
                "max_depth" => self.dyck.max_depth = num(value)?,
                "n_train" => self.dyck.n_train = num(value)?,
                "n_test" => self.dyck.n_test = num(value)?,
                "data_seed" => self.dyck.seed = num(value)?,
                "scan_path" => self.scan_path = path(value),
                "scan_n_train" => self.scan_n_train = num(value)?,
                "scan_data_seed" => self.scan_data_seed = num(value)?,
                "test_limit" => self.test_limit = num(value)?,
                "d_model" => self.model.d_model = opt(value)?,
                "n_layers" => self.model.n_layers = opt(value)?,
                "n_heads" => self.model.n_heads = opt(value)?,
                "d_ff" => self.model.d_ff = opt(value)?,
                "init_scale" => self.model.init_scale = opt(value)?,
                "lr" => self.lr = num(value)?,
                "weight_decay" => self.weight_decay = num(value)?,
                "beta1" => self.beta1 = num(value)?,
                "beta2" => self.beta2 = num(value)?,
                "eps" => self.eps = num(value)?,
                "clip_norm" => self.clip_norm = num(value)?,
                "max_steps" => self.max_steps = num(value)?,
                "seeds" => {
                    self.seeds = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(num::<u64>)
                        .collect::<Result<_, _>>()?
                }
                "batch_size" => self.batch_size = num(value)?,
                "eval_interval" => self.eval_interval = num(value)?,
                "dense" => {
                    self.dense = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|w| {
                            let (u, e) = w.split_once(':').ok_or_else(|| format!("window {w:?} is not until:every"))?;
                            Ok((num(u.trim())?, num(e.trim())?))
                        })
                        .collect::<Result<_, String>>()?
                }
                "snapshot_interval" => self.snapshot_interval = num(value)?,
                "checkpoint_interval" => self.checkpoint_interval = num(value)?,
                "probe_eta" => self.probe.eta = num(value)?,
                "probe_k" => self.probe.k_meas = num(value)?,
                "probe_batch" => self.probe.batch_size = num(value)?,
                "probe_floor" => self.probe.floor = num(value)?,
                "probe_target" => self.probe.target = num(value)?,
                "probe_interval" => self.probe.interval = num(value)?,
                "sample_deltas" => self.sample_deltas = num(value)?,
                "early_stop" => self.early_stop = boolean(value)?,
                "early_stop_margin" => self.early_stop_margin = num(value)?,
                "grok_threshold" => self.detector.threshold = num(value)?,
                "grok_sustained" => self.detector.n_sustained = num(value)?,
                "onset_multiplier" => self.detector.onset_multiplier = num(value)?,
                "onset_floor" => self.detector.onset_floor = num(value)?,
                "onset_window" => self.detector.baseline_window = num(value)?,
                "condition" => self.intervention.condition = Condition::parse(value).map_err(|e| e.to_string())?,
                "strength" => self.intervention.strength = num(value)?,
                "trigger" => self.intervention.trigger = opt(value)?,
                "noise_period" => self.intervention.period = num(value)?,
                "basis_source" => self.intervention.basis_source = path(value),
                "basis_rank" => self.intervention.basis_rank = num(value)?,
                "output_dir" => self.output_dir = PathBuf::from(value),
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        match r {
            Ok(()) => Ok(()),
            Err(reason) if reason.is_empty() => Err(ConfigError::UnknownKey(key.into())),
            Err(reason) => Err(err(reason)),
        }
    }

    /// Starts from the preset of the `task` pair (Dyck when absent) and
    /// applies the remaining pairs in order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ConfigError> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let task = match pairs.iter().rev().find(|(k, _)| *k == "task") {
            Some((_, "scan")) => Task::Scan,
            Some((_, "dyck")) | None => Task::Dyck,
            Some((_, v)) => {
                return Err(ConfigError::BadValue {
                    key: "task".into(),
                    value: v.to_string(),
                    reason: "expected dyck or scan".into(),
                })
            }
        };
        let mut cfg = ExperimentConfig::for_task(task);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Parses the flat document. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, content: raw.to_string() })?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hash of everything that affects one run's trajectory: all keys
    /// except the seed list and output directory, plus the seed itself.
    pub fn run_hash(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            if k == "seeds" || k == "output_dir" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.update(format!("seed={seed}\n").as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}
