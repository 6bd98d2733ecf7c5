//! One training run: scheduling, persistence, checkpoints and detectors.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig, Task};
use crate::detect::{self, LeadTime};
use crate::interventions::{self, BasisSet, Condition, KickOutcome};
use crate::models::{self, ModelConfig, ModelError};
use crate::optim::{clip_global, AdamWConfig, OptState, OptimError};
use crate::params::NamedParams;
use crate::probes::{self, DefectMeasurement};
use crate::rng;
use crate::tasks::{self, TaskDataset, TaskError};
use crate::trajectory::{self, SnapshotArchive, TrajectoryError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Intervention(#[from] interventions::InterventionError),
    #[error("non-finite loss at step {step} (last good step {last_good:?})")]
    NonFinite { step: u64, last_good: Option<u64> },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("checkpoint in {dir} belongs to config {found}, expected {expected}")]
    HashMismatch { dir: String, found: String, expected: String },
    #[error("baseline run {0} has no detected onset to trigger the kick")]
    NoTrigger(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

pub(crate) fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> RunError + '_ {
    move |source| RunError::Json { path: path.display().to_string(), source }
}

/// Train and test sets with the matching model configuration.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: TaskDataset,
    pub test: TaskDataset,
    pub model: ModelConfig,
}

pub fn prepare(config: &ExperimentConfig) -> Result<TaskData, RunError> {
    let limit = |n: usize| if config.test_limit == 0 { n } else { config.test_limit.min(n) };
    let (train, test, mut model) = match config.task {
        Task::Dyck => {
            let split = tasks::generate_dyck(&config.dyck)?;
            let mut test = split.test;
            test.truncate(limit(test.len()));
            let model = ModelConfig {
                tgt_vocab: config.dyck.classes(),
                max_src_len: config.dyck.seq_len,
                ..ModelConfig::dyck()
            };
            (TaskDataset::Dyck(Arc::new(split.train)), TaskDataset::Dyck(Arc::new(test)), model)
        }
        Task::Scan => {
            let split = match &config.scan_path {
                Some(p) => tasks::load_scan(&tasks::ScanConfig {
                    path: p.clone(),
                    n_train: config.scan_n_train,
                    data_seed: config.scan_data_seed,
                })?,
                None => tasks::split_scan(&tasks::scan::grammar_lines().join("\n"), config.scan_n_train, config.scan_data_seed)?,
            };
            let vocab = Arc::new(split.vocab);
            let model = ModelConfig::scan(
                vocab.commands.len(),
                vocab.actions.len(),
                split.max_command_len + 1,
                split.max_action_len + 1,
            );
            let mut test = split.test;
            test.truncate(limit(test.len()));
            (
                TaskDataset::Scan { examples: Arc::new(split.train), vocab: vocab.clone() },
                TaskDataset::Scan { examples: Arc::new(test), vocab },
                model,
            )
        }
    };
    let o = &config.model;
    model.d_model = o.d_model.unwrap_or(model.d_model);
    model.n_layers = o.n_layers.unwrap_or(model.n_layers);
    model.n_heads = o.n_heads.unwrap_or(model.n_heads);
    model.d_ff = o.d_ff.unwrap_or(model.d_ff);
    model.init_scale = o.init_scale.unwrap_or(model.init_scale);
    model.validate()?;
    Ok(TaskData { train, test, model })
}

/// What happens at one step before its update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleSlot {
    pub eval: bool,
    pub probe: bool,
    pub snapshot: bool,
}

pub fn schedule(config: &ExperimentConfig, step: u64) -> ScheduleSlot {
    let dense = config.dense.iter().any(|&(until, every)| step <= until && step % every == 0);
    let probe = dense || step % config.probe_interval() == 0;
    ScheduleSlot {
        // Probes always land on evaluation records.
        eval: dense || probe || step % config.eval_interval == 0 || step == config.max_steps(),
        probe,
        snapshot: step % config.snapshot_interval == 0,
    }
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub defect_median: Option<f64>,
    pub defect_q25: Option<f64>,
    pub defect_q75: Option<f64>,
    pub param_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngProvenance {
    pub master_seed: u64,
    pub derivation: String,
    pub streams: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub task: Task,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub condition: Condition,
    pub strength: f64,
    pub max_steps: u64,
    /// Last step evaluated.
    pub last_step: u64,
    pub stopped_early: bool,
    pub grok_step: Option<u64>,
    pub onset_step: Option<u64>,
    pub lead: Option<LeadTime>,
    pub flags: Vec<String>,
    pub kick: Option<KickOutcome>,
    pub evals: Vec<MetricRecord>,
    pub wall_clock_s: f64,
    pub rng: RngProvenance,
}

impl RunRecord {
    pub fn test_series(&self) -> Vec<(u64, f64)> {
        self.evals.iter().map(|e| (e.step, e.test_acc)).collect()
    }

    pub fn train_series(&self) -> Vec<(u64, f64)> {
        self.evals.iter().map(|e| (e.step, e.train_acc)).collect()
    }

    pub fn defect_series(&self) -> Vec<(u64, Option<f64>)> {
        self.evals.iter().filter(|e| e.defect_median.is_some()).map(|e| (e.step, e.defect_median)).collect()
    }

    /// First evaluation with train accuracy at or above `threshold`.
    pub fn first_train_at(&self, threshold: f64) -> Option<u64> {
        self.evals.iter().find(|e| e.train_acc >= threshold).map(|e| e.step)
    }

    pub fn row(&self) -> detect::RunRow {
        detect::RunRow {
            lr: self.lr,
            seed: self.seed,
            grok_step: self.grok_step,
            onset_step: self.onset_step,
            flags: self.flags.clone(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(RECORD_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(json_err(&path))
    }
}

pub const RECORD_FILE: &str = "record.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PROBES_FILE: &str = "probes.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const SAMPLE_DIR: &str = "samples";
const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Archives kept at every probe step for the integrability analysis.
pub fn sample_dirs(run_dir: &Path, n_deltas: usize) -> (PathBuf, PathBuf, Vec<PathBuf>) {
    let s = run_dir.join(SAMPLE_DIR);
    (s.join("weights"), s.join("grad_accum"), (0..n_deltas).map(|i| s.join(format!("delta_{i}"))).collect())
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    /// The next step to execute.
    step: u64,
    params: Vec<f32>,
    opt: OptState,
    grad_accum: Vec<f64>,
    probe_rng: ChaCha8Rng,
    intervention_rng: ChaCha8Rng,
    flags: Vec<String>,
    kick: Option<KickOutcome>,
    wall_clock_s: f64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn mean_loss(cfg: &ModelConfig, params: &NamedParams<f32>, data: &TaskDataset) -> Result<f64, ModelError> {
    let mut acc = 0.0;
    for start in (0..data.len()).step_by(512) {
        let idx: Vec<usize> = (start..(start + 512).min(data.len())).collect();
        let (l, _) = models::forward_loss(cfg, params, &data.batch(&idx))?;
        acc += l * idx.len() as f64;
    }
    Ok(acc / data.len().max(1) as f64)
}

/// Keeps the JSON lines whose `step` is below `step`.
fn truncate_jsonl(path: &Path, step: u64) -> Result<(), RunError> {
    if !path.exists() {
        return Ok(());
    }
    #[derive(Deserialize)]
    struct Step {
        step: u64,
    }
    let f = File::open(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        match serde_json::from_str::<Step>(&line) {
            Ok(s) if s.step < step => {
                kept.push_str(&line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    write_atomic(path, kept.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, RunError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(json_err(path))?);
        }
    }
    Ok(out)
}

pub fn read_probes(path: &Path) -> Result<Vec<DefectMeasurement>, RunError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(json_err(path))?);
        }
    }
    Ok(out)
}

pub fn run_id(config: &ExperimentConfig, seed: u64) -> String {
    let i = &config.intervention;
    let mut id = format!("{}_lr{:e}_wd{}_s{}", config.task.as_str(), config.lr, config.weight_decay, seed);
    if i.condition != Condition::Baseline {
        id.push_str(&format!("_{}{:e}", i.condition.as_str(), i.strength));
    }
    id
}

/// Hooks resolved once per run from the intervention spec.
struct Hooks {
    condition: Condition,
    strength: f64,
    kick_at: Option<u64>,
    bases: Option<BasisSet>,
    period: u64,
}

/// The baseline run an intervention reads: `basis_source` itself when it
/// holds a run record, otherwise the same-seed baseline run beneath it.
pub fn baseline_dir(config: &ExperimentConfig, seed: u64) -> Option<PathBuf> {
    let src = config.intervention.basis_source.as_ref()?;
    if src.join(RECORD_FILE).exists() {
        return Some(src.clone());
    }
    let mut base = config.clone();
    base.intervention = Default::default();
    Some(src.join(run_id(&base, seed)))
}

fn resolve_hooks(config: &ExperimentConfig, seed: u64, view: &crate::params::ParamView) -> Result<Hooks, RunError> {
    let spec = &config.intervention;
    let mut hooks =
        Hooks { condition: spec.condition, strength: spec.strength, kick_at: None, bases: None, period: spec.period };
    if spec.is_noop() {
        hooks.condition = Condition::Baseline;
        return Ok(hooks);
    }
    let source_dir = baseline_dir(config, seed);
    let source = source_dir.as_deref();
    match spec.condition {
        Condition::Kick => {
            hooks.kick_at = match spec.trigger {
                Some(t) => Some(t),
                None => {
                    let src = source.expect("validated");
                    let rec = RunRecord::load(src)?;
                    Some(rec.onset_step.ok_or_else(|| RunError::NoTrigger(src.display().to_string()))?)
                }
            }
        }
        Condition::Project | Condition::Penalty => {
            let src = source.expect("validated");
            let archive = SnapshotArchive::open(src.join(SNAPSHOT_DIR))?;
            let targets: Vec<String> = view
                .names()
                .filter(|n| trajectory::matrix_class(n) == Some(trajectory::MatrixClass::Attention))
                .map(str::to_string)
                .collect();
            let set = BasisSet::from_archive(&archive, &targets, spec.basis_rank)?;
            set.check_targets(view, &targets)?;
            hooks.bases = Some(set);
        }
        Condition::Noise | Condition::Baseline => {}
    }
    Ok(hooks)
}

/// Gradient of training step `step`: the full set for Dyck-style training,
/// otherwise a batch from an epoch order keyed by the data stream.
struct Batcher {
    full: Option<tasks::TaskBatch>,
    batch_size: usize,
    master_seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Batcher {
    fn new(train: &TaskDataset, batch_size: usize, master_seed: u64) -> Self {
        let full = (batch_size == 0 || batch_size >= train.len()).then(|| train.full_batch());
        Batcher { full, batch_size, master_seed, epoch: None }
    }

    fn batch(&mut self, train: &TaskDataset, step: u64) -> tasks::TaskBatch {
        if let Some(b) = &self.full {
            return b.clone();
        }
        let per_epoch = train.len().div_ceil(self.batch_size) as u64;
        let (e, i) = (step / per_epoch, (step % per_epoch) as usize);
        if self.epoch.as_ref().map(|x| x.0) != Some(e) {
            let seed = rng::seed(self.master_seed, &format!("{}/{e}", rng::DATA));
            self.epoch = Some((e, train.epoch_order(seed)));
        }
        let order = &self.epoch.as_ref().expect("epoch set").1;
        let lo = i * self.batch_size;
        train.batch(&order[lo..(lo + self.batch_size).min(order.len())])
    }
}

/// Trains one seed into `dir`, resuming from a checkpoint there when it
/// matches the configuration.
pub fn train_run(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunRecord, RunError> {
    train_run_until(config, seed, dir, None)
}

/// [`train_run`] that returns after writing the checkpoint for `halt_at`
/// without finishing, as if the process had been interrupted there.
pub fn train_run_until(
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    halt_at: Option<u64>,
) -> Result<RunRecord, RunError> {
    config.validate()?;
    let started = Instant::now();
    let hash = config.run_hash(seed);
    let id = run_id(config, seed);
    let data = prepare(config)?;
    let model = &data.model;
    let view = Arc::new(model.param_view());
    let max_steps = config.max_steps();
    let probe_cfg = config.resolved_probe();
    let hooks = resolve_hooks(config, seed, &view)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let resume: Option<Checkpoint> = if ckpt_path.exists() {
        let text = fs::read_to_string(&ckpt_path).map_err(io_err(&ckpt_path))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(json_err(&ckpt_path))?;
        if c.config_hash != hash {
            return Err(RunError::HashMismatch { dir: dir.display().to_string(), found: c.config_hash, expected: hash });
        }
        Some(c)
    } else {
        None
    };

    let names = trajectory::default_matrices(&view);
    let (w_dir, g_dir, d_dirs) = sample_dirs(dir, config.sample_deltas);
    let metrics_path = dir.join(METRICS_FILE);
    let probes_path = dir.join(PROBES_FILE);
    let mut archives: Vec<(PathBuf, u64)> = vec![(dir.join(SNAPSHOT_DIR), config.snapshot_interval)];
    archives.push((w_dir, probe_cfg.interval));
    archives.push((g_dir, probe_cfg.interval));
    archives.extend(d_dirs.into_iter().map(|d| (d, probe_cfg.interval)));

    let mut params;
    let mut opt;
    let mut grad_accum;
    let mut probe_rng;
    let mut int_rng;
    let mut flags;
    let mut kick;
    let mut prior_clock;
    let start;
    let mut opened = Vec::new();
    match resume {
        Some(c) => {
            params = NamedParams::from_flat(view.clone(), c.params);
            opt = c.opt;
            grad_accum = c.grad_accum;
            probe_rng = c.probe_rng;
            int_rng = c.intervention_rng;
            flags = c.flags;
            kick = c.kick;
            prior_clock = c.wall_clock_s;
            start = c.step;
            truncate_jsonl(&metrics_path, start)?;
            truncate_jsonl(&probes_path, start)?;
            for (d, _) in &archives {
                let mut a = SnapshotArchive::open(d)?;
                a.truncate_after(start - 1)?;
                opened.push(a);
            }
        }
        None => {
            params = models::build_model(model, rng::seed(seed, rng::INIT))?;
            let adam = AdamWConfig {
                lr: config.lr,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
                weight_decay: config.weight_decay,
                clip_norm: config.clip_norm,
            };
            opt = OptState::new(adam, &view);
            grad_accum = vec![0.0f64; view.total_len()];
            probe_rng = rng::stream(seed, rng::PROBE);
            int_rng = rng::stream(seed, rng::INTERVENTION);
            flags = Vec::new();
            kick = None;
            prior_clock = 0.0;
            start = 0;
            for p in [&metrics_path, &probes_path, &dir.join(RECORD_FILE)] {
                if p.exists() {
                    fs::remove_file(p).map_err(io_err(p))?;
                }
            }
            let samples = dir.join(SAMPLE_DIR);
            for d in [dir.join(SNAPSHOT_DIR), samples] {
                if d.exists() {
                    fs::remove_dir_all(&d).map_err(io_err(&d))?;
                }
            }
            for (d, interval) in &archives {
                opened.push(SnapshotArchive::create(d, &id, *interval, &view, &names)?);
            }
        }
    }
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_text()).map_err(io_err(&config_path))?;

    let mut evals = if start > 0 { read_metrics(&metrics_path)? } else { Vec::new() };
    let open_append = |p: &Path| -> Result<BufWriter<File>, RunError> {
        Ok(BufWriter::new(OpenOptions::new().create(true).append(true).open(p).map_err(io_err(p))?))
    };
    let mut metrics_out = open_append(&metrics_path)?;
    let mut probes_out = open_append(&probes_path)?;
    let mut batcher = Batcher::new(&data.train, config.batch_size, seed);
    let mut stopped_early = false;
    let mut last_step = start;
    let mut last_good: Option<u64> = start.checked_sub(1);

    let mut step = start;
    loop {
        let slot = schedule(config, step);
        let mut measurement = None;
        if slot.probe {
            let m = probes::probe_at_step(model, &params, &data.train, &probe_cfg, step, config.sample_deltas, &mut probe_rng)?;
            serde_json::to_writer(&mut probes_out, &m).map_err(json_err(&probes_path))?;
            probes_out.write_all(b"\n").map_err(io_err(&probes_path))?;
            // weights, accumulated gradient, then the kept commutators
            opened[1].record(step, &params)?;
            opened[2].record_from_full(step, &view, &grad_accum)?;
            for (i, d) in m.deltas.iter().enumerate() {
                opened[3 + i].record_from_full(step, &view, d)?;
            }
            measurement = Some(m);
        }
        if slot.snapshot {
            opened[0].record(step, &params)?;
        }
        if slot.eval {
            let rec = MetricRecord {
                step,
                train_acc: models::evaluate_accuracy(model, &params, &data.train)?,
                test_acc: models::evaluate_accuracy(model, &params, &data.test)?,
                train_loss: mean_loss(model, &params, &data.train)?,
                defect_median: measurement.as_ref().and_then(|m| m.median),
                defect_q25: measurement.as_ref().and_then(|m| m.q25),
                defect_q75: measurement.as_ref().and_then(|m| m.q75),
                param_norm: params.norm(),
            };
            serde_json::to_writer(&mut metrics_out, &rec).map_err(json_err(&metrics_path))?;
            metrics_out.write_all(b"\n").map_err(io_err(&metrics_path))?;
            metrics_out.flush().map_err(io_err(&metrics_path))?;
            probes_out.flush().map_err(io_err(&probes_path))?;
            evals.push(rec);
            last_step = step;
            if config.early_stop {
                let series: Vec<(u64, f64)> = evals.iter().map(|e| (e.step, e.test_acc)).collect();
                if let Some(g) = detect::detect_grok(&series, &config.detector) {
                    if step >= g + config.early_stop_margin {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        if step >= max_steps {
            break;
        }
        if hooks.kick_at == Some(step) && kick.is_none() {
            let m = probes::probe_at_step(model, &params, &data.train, &probe_cfg, step, probe_cfg.k_meas, &mut int_rng)?;
            let out = interventions::apply_kick(params.flat_mut(), &m.deltas, hooks.strength);
            if let Some(f) = &out.flag {
                flags.push(format!("{f}@{step}"));
            }
            kick = Some(out);
        }

        let batch = batcher.batch(&data.train, step);
        let (loss, mut grads) = models::loss_and_grad(model, &params, &batch)?;
        if !loss.is_finite() {
            return Err(RunError::NonFinite { step, last_good });
        }
        grad_accum.iter_mut().zip(grads.flat()).for_each(|(a, &g)| *a += g as f64);
        if let Some(bases) = &hooks.bases {
            interventions::apply_penalty(&mut grads, bases, hooks.strength)?;
        }
        match clip_global(&mut grads, config.clip_norm) {
            Ok(_) => {}
            Err(OptimError::NonFinite { .. }) => return Err(RunError::NonFinite { step, last_good }),
            Err(e) => return Err(e.into()),
        }
        opt.step(&mut params, &grads)?;
        if hooks.condition == Condition::Noise && step % hooks.period == 0 {
            let (noise, raw) = interventions::orthogonal_noise(grads.flat(), config.lr, hooks.strength, &mut int_rng);
            interventions::add_noise(params.flat_mut(), &noise);
            if raw {
                flags.push(format!("noise_zero_grad@{step}"));
            }
        }
        last_good = Some(step);
        step += 1;

        if step % config.checkpoint_interval == 0 && step < max_steps {
            let c = Checkpoint {
                config_hash: hash.clone(),
                step,
                params: params.flat().to_vec(),
                opt: opt.clone(),
                grad_accum: grad_accum.clone(),
                probe_rng: probe_rng.clone(),
                intervention_rng: int_rng.clone(),
                flags: flags.clone(),
                kick: kick.clone(),
                wall_clock_s: prior_clock + started.elapsed().as_secs_f64(),
            };
            metrics_out.flush().map_err(io_err(&metrics_path))?;
            probes_out.flush().map_err(io_err(&probes_path))?;
            let bytes = serde_json::to_vec(&c).map_err(json_err(&ckpt_path))?;
            write_atomic(&ckpt_path, &bytes)?;
            if halt_at == Some(step) {
                prior_clock = c.wall_clock_s;
                return Ok(partial_record(config, seed, &id, &hash, evals, last_step, flags, kick, prior_clock));
            }
        }
    }
    metrics_out.flush().map_err(io_err(&metrics_path))?;
    probes_out.flush().map_err(io_err(&probes_path))?;

    let mut record = partial_record(
        config,
        seed,
        &id,
        &hash,
        evals,
        last_step,
        flags,
        kick,
        prior_clock + started.elapsed().as_secs_f64(),
    );
    record.stopped_early = stopped_early;
    finish_detectors(&mut record, config);
    let rec_path = dir.join(RECORD_FILE);
    let text = serde_json::to_string_pretty(&record).map_err(json_err(&rec_path))?;
    write_atomic(&rec_path, text.as_bytes())?;
    write_summary(&dir.join(SUMMARY_FILE), std::slice::from_ref(&record))?;
    if ckpt_path.exists() {
        fs::remove_file(&ckpt_path).map_err(io_err(&ckpt_path))?;
    }
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn partial_record(
    config: &ExperimentConfig,
    seed: u64,
    id: &str,
    hash: &str,
    evals: Vec<MetricRecord>,
    last_step: u64,
    flags: Vec<String>,
    kick: Option<KickOutcome>,
    wall_clock_s: f64,
) -> RunRecord {
    RunRecord {
        run_id: id.to_string(),
        config_hash: hash.to_string(),
        task: config.task,
        lr: config.lr,
        weight_decay: config.weight_decay,
        seed,
        condition: config.intervention.condition,
        strength: config.intervention.strength,
        max_steps: config.max_steps(),
        last_step,
        stopped_early: false,
        grok_step: None,
        onset_step: None,
        lead: None,
        flags,
        kick,
        evals,
        wall_clock_s,
        rng: RngProvenance {
            master_seed: seed,
            derivation: "ChaCha8 keyed by SHA-256(seed_le || name)".into(),
            streams: [rng::INIT, rng::DATA, rng::PROBE, rng::NULL, rng::INTERVENTION].map(String::from).to_vec(),
        },
    }
}

/// Fills grok, onset and lead from the record's metric stream.
pub fn finish_detectors(record: &mut RunRecord, config: &ExperimentConfig) {
    record.grok_step = detect::detect_grok(&record.test_series(), &config.detector);
    record.onset_step = match detect::detect_onset(&record.run_id, &record.defect_series(), &config.detector) {
        Ok(o) => o,
        Err(e) => {
            record.flags.push(format!("onset_error: {e}"));
            None
        }
    };
    if record.grok_step.is_none() {
        record.flags.push("no_grok".into());
    } else if record.onset_step.is_none() {
        record.flags.push("no_onset".into());
    }
    record.lead = record.grok_step.zip(record.onset_step).map(|(g, o)| detect::lead_time(g, o));
    if record.lead.is_some_and(|l| !l.valid) {
        record.flags.push("negative_lead".into());
    }
}

/// Per-run summary rows, one line per run.
pub fn write_summary(path: &Path, records: &[RunRecord]) -> Result<(), RunError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(f);
    let csv_err = |e: csv::Error| RunError::Io { path: path.display().to_string(), source: e.into() };
    w.write_record(["lr", "seed", "condition", "strength", "grok_step", "onset_step", "lead", "lead_fraction", "flags"])
        .map_err(csv_err)?;
    for r in records {
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            r.lr.to_string(),
            r.seed.to_string(),
            r.condition.as_str().to_string(),
            r.strength.to_string(),
            opt(r.grok_step),
            opt(r.onset_step),
            r.lead.map(|l| l.dt.to_string()).unwrap_or_default(),
            r.lead.map(|l| format!("{:.4}", l.fraction)).unwrap_or_default(),
            r.flags.join(";"),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Loads a finished run from `dir` if its hash matches, otherwise trains
/// (resuming any checkpoint).
pub fn ensure_run(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunRecord, RunError> {
    if dir.join(RECORD_FILE).exists() {
        if let Ok(r) = RunRecord::load(dir) {
            if r.config_hash == config.run_hash(seed) {
                return Ok(r);
            }
        }
    }
    train_run(config, seed, dir)
}
