//! Experiment orchestration: declarative run configs, the deterministic
//! training loop, per-run logs, reports and presets.
//!
//! A run directory holds `config.toml`, `meta.json`, `metrics.csv` (the
//! fixed balance schema), `extra.csv` (update norms, triangle checks, op
//! counters), `events.jsonl` (rate refreshes and coordinate-descent
//! switches) and `checkpoint.bin`. Synthetic bound-check runs hold
//! `trajectory.json` and `verification.json` instead of the CSV pair.

pub mod presets;
pub mod report;
pub mod svg;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::BalanceRecord;
use crate::model::{Component, Example, Model, ModelShape};
use crate::optimizer::{Backend, CommitOptimizer, StepConfig};
use crate::rng::{step_rng, streams};
use crate::schedulers::{SchedulerConfig, SchedulerState};
use crate::tasks::{generate_dataset, pretrain_backbone, Dataset, TaskKind, TaskSpec};
use crate::theory::{verify_trajectory, LogisticProblem, SyntheticConfig, Trajectory, Verification};

pub const SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 18] = [
    "step", "loss", "kappa", "kappa_ma", "dT", "dS", "dJoint", "HS", "HT", "boundT", "boundS", "gnormS", "gnormT",
    "lrS", "lrT", "regDS", "regDT", "evalAcc",
];

pub const EXTRA_COLUMNS: [&str; 14] = [
    "step",
    "updS",
    "updT",
    "kappaDegenerate",
    "dSAfterT",
    "triangleLiteral",
    "triangleSamePoint",
    "forwards",
    "backwards",
    "diagForwards",
    "gradNormS",
    "gradNormT",
    "combinedNormS",
    "combinedNormT",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ToyQa,
    ToyCaption,
    /// Logistic regression for bound verification; no model involved.
    SyntheticLogistic,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::ToyQa => "toy-qa",
            Task::ToyCaption => "toy-caption",
            Task::SyntheticLogistic => "synthetic-logistic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

/// Full declarative description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Method label used to group runs in reports.
    pub method: String,
    pub task: Task,
    pub seeds: Vec<u64>,
    /// Seed of the generated dataset, shared by all training seeds.
    pub data_seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    /// Pre-generated dataset; generated from the task preset when absent.
    pub dataset: Option<PathBuf>,
    /// Pretrained backbone checkpoint; pretrained on demand when absent.
    pub backbone: Option<PathBuf>,
    /// Replaces the task preset's spec.
    pub spec: Option<TaskSpec>,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    pub scheduler: SchedulerConfig,
    pub optimizer: StepConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            method: "custom".into(),
            task: Task::ToyQa,
            seeds: vec![0],
            data_seed: 0,
            steps: 2000,
            batch_size: 16,
            log_every: 1,
            eval_every: 50,
            checkpoint_every: 50,
            out_dir: PathBuf::from("runs/run"),
            dataset: None,
            backbone: None,
            spec: None,
            model: ModelShape::default(),
            pretrain: PretrainConfig::default(),
            scheduler: SchedulerConfig::default(),
            optimizer: StepConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        if let Some(s) = &self.spec {
            return Ok(s.clone());
        }
        match self.task {
            Task::ToyQa => Ok(TaskSpec::toy_qa(self.data_seed)),
            Task::ToyCaption => Ok(TaskSpec::toy_caption(self.data_seed)),
            Task::SyntheticLogistic => Err(Error::config("the synthetic task has no dataset spec")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("batch_size and cadences must be >= 1"));
        }
        if self.task == Task::SyntheticLogistic {
            let s = &self.synthetic;
            if s.points == 0 || s.dim == 0 || !(s.alpha > 0.0) || !(s.beta2 > 0.0 && s.beta2 < 1.0) || s.lambda < 0.0 {
                return Err(Error::config("invalid synthetic settings"));
            }
            return Ok(());
        }
        self.model.validate()?;
        self.scheduler.validate()?;
        self.optimizer.validate()?;
        if self.scheduler.gamma != self.optimizer.gamma {
            return Err(Error::config("scheduler.gamma and optimizer.gamma must agree"));
        }
        let spec = self.task_spec()?;
        spec.validate()?;
        if spec.vocab != self.model.vocab || spec.feature_dim != self.model.feature_dim {
            return Err(Error::config(format!(
                "model (vocab {}, feature_dim {}) does not fit the task (vocab {}, feature_dim {})",
                self.model.vocab, self.model.feature_dim, spec.vocab, spec.feature_dim
            )));
        }
        let longest = self.model.soft_tokens + 3 + spec.answer_len[1] - 1;
        if longest > self.model.max_seq {
            return Err(Error::config(format!(
                "task needs sequences of {longest} but model.max_seq is {}",
                self.model.max_seq
            )));
        }
        Ok(())
    }

    /// Short variant for smoke runs.
    pub fn smoke(&self, steps: u64) -> Self {
        let mut c = self.clone();
        c.steps = steps;
        c.pretrain.steps = c.pretrain.steps.min(steps as usize);
        c.eval_every = c.eval_every.min(steps.max(1));
        c.seeds.truncate(1);
        c
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed-{seed}"))
    }
}

/// `meta.json` of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub name: String,
    pub method: String,
    pub task: Task,
    pub seed: u64,
    pub strategy: String,
    pub regularizer: bool,
    pub lambda: f64,
    pub backend: Backend,
    pub columns: Vec<String>,
    pub extra_columns: Vec<String>,
    pub backbone_checksum: String,
    pub pretrain_final_loss: Option<f64>,
    pub completed: bool,
    pub aborted: Option<String>,
}

/// Per-step extras that do not belong to the fixed schema.
#[derive(Clone, Debug, PartialEq)]
pub struct StepExtras {
    pub step: u64,
    pub update_norms: [f64; 2],
    pub kappa_degenerate: bool,
    pub d_s_after_t: Option<f64>,
    pub triangle_literal: Option<bool>,
    pub triangle_same_point: Option<bool>,
    pub ops: (u64, u64),
    pub diagnostic_forwards: u64,
    pub grad_norms: [f64; 2],
    pub combined_norms: [f64; 2],
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub records: Vec<BalanceRecord>,
    pub extras: Vec<StepExtras>,
    pub events: Vec<crate::schedulers::Event>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub dir: Option<PathBuf>,
    pub log: RunLog,
    pub bound: Option<(Trajectory, Verification)>,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn record_row(r: &BalanceRecord) -> Vec<String> {
    let mut row: Vec<String> = [
        r.loss, r.kappa, r.kappa_ma, r.d_t, r.d_s, r.d_joint, r.h_s, r.h_t, r.bound_t, r.bound_s, r.gnorm_s,
        r.gnorm_t, r.lr_s, r.lr_t, r.reg_ds, r.reg_dt,
    ]
    .iter()
    .map(|v| fmt(*v))
    .collect();
    row.insert(0, r.step.to_string());
    row.push(r.eval_acc.map(fmt).unwrap_or_default());
    row
}

fn extras_row(e: &StepExtras) -> Vec<String> {
    let opt_f = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let opt_b = |v: Option<bool>| v.map(|b| (b as u8).to_string()).unwrap_or_default();
    vec![
        e.step.to_string(),
        fmt(e.update_norms[0]),
        fmt(e.update_norms[1]),
        (e.kappa_degenerate as u8).to_string(),
        opt_f(e.d_s_after_t),
        opt_b(e.triangle_literal),
        opt_b(e.triangle_same_point),
        e.ops.0.to_string(),
        e.ops.1.to_string(),
        e.diagnostic_forwards.to_string(),
        fmt(e.grad_norms[0]),
        fmt(e.grad_norms[1]),
        fmt(e.combined_norms[0]),
        fmt(e.combined_norms[1]),
    ]
}

/// Greedy-decoding accuracy on `examples`: exact match for qa, token-level
/// match (positions of the gold answer) for captions.
pub fn evaluate(model: &Model, spec: &TaskSpec, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("evaluation on an empty split"));
    }
    let max_len = examples.iter().map(|e| e.answer.len()).max().unwrap_or(1);
    let end = (spec.kind == TaskKind::Caption).then(|| spec.layout().end);
    let prompts: Vec<(&[f64], &[usize])> = examples.iter().map(|e| (&e.feature[..], &e.instruction[..])).collect();
    let decoded = model.greedy_decode_batch(&prompts, max_len, end)?;
    Ok(match spec.kind {
        TaskKind::Qa => {
            let hits = examples
                .iter()
                .zip(&decoded)
                .filter(|(e, d)| d.len() >= e.answer.len() && d[..e.answer.len()] == e.answer[..])
                .count();
            hits as f64 / examples.len() as f64
        }
        TaskKind::Caption => {
            let total: usize = examples.iter().map(|e| e.answer.len()).sum();
            let hits: usize = examples
                .iter()
                .zip(&decoded)
                .map(|(e, d)| e.answer.iter().zip(d).filter(|(a, b)| a == b).count())
                .sum();
            hits as f64 / total as f64
        }
    })
}

/// Training batch of `step`: `size` draws with replacement.
pub fn sample_batch(dataset: &Dataset, seed: u64, step: u64, size: usize) -> Vec<Example> {
    let mut rng = step_rng(seed, streams::TRAIN_BATCH, step);
    let n = dataset.train.len();
    (0..size).map(|_| dataset.train[rng.random_range(0..n)].clone()).collect()
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let spec = config.task_spec()?;
    match &config.dataset {
        Some(p) => Dataset::load(p, Some(&spec)),
        None => generate_dataset(&spec),
    }
}

/// Model with the frozen backbone for `seed`, plus the pretraining loss.
pub fn prepare_model(config: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<(Model, Option<f64>)> {
    match &config.backbone {
        Some(p) => {
            let mut m = Model::init(&config.model, seed)?;
            m.load_tensors(checkpoint::load(p)?, &[Component::Backbone])?;
            Ok((m, None))
        }
        None => {
            let p = pretrain_backbone(
                dataset,
                &config.model,
                seed,
                config.pretrain.steps,
                config.pretrain.lr,
                config.pretrain.batch_size,
            )?;
            let loss = p.final_loss();
            Ok((p.model, Some(loss)))
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let mut buf = Vec::new();
    checkpoint::write_to(&mut buf, &model.named_tensors())?;
    write_atomic(&dir.join("checkpoint.bin"), &buf)
}

struct Sinks {
    dir: PathBuf,
    metrics: csv::Writer<BufWriter<File>>,
    extra: csv::Writer<BufWriter<File>>,
    events: BufWriter<File>,
    meta: RunMeta,
}

impl Sinks {
    fn open(dir: &Path, config: &ExperimentConfig, meta: RunMeta) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut own = config.clone();
        own.seeds = vec![meta.seed];
        std::fs::write(dir.join("config.toml"), own.to_toml()?)?;
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let mut metrics = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("metrics.csv"))?));
        metrics.write_record(COLUMNS).map_err(csv_err)?;
        let mut extra = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("extra.csv"))?));
        extra.write_record(EXTRA_COLUMNS).map_err(csv_err)?;
        let events = BufWriter::new(File::create(dir.join("events.jsonl"))?);
        let s = Self {
            dir: dir.to_path_buf(),
            metrics,
            extra,
            events,
            meta,
        };
        s.write_meta()?;
        Ok(s)
    }

    fn write_meta(&self) -> Result<()> {
        write_atomic(&self.dir.join("meta.json"), &serde_json::to_vec_pretty(&self.meta)?)
    }

    fn row(&mut self, r: &BalanceRecord, e: &StepExtras) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        self.metrics.write_record(record_row(r)).map_err(csv_err)?;
        self.extra.write_record(extras_row(e)).map_err(csv_err)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.extra.flush()?;
        self.events.flush()?;
        Ok(())
    }
}

/// One seed of a model run. With `dir` set, logs and checkpoints are
/// written there as the run progresses.
pub fn run_seed(config: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<RunOutput> {
    config.validate()?;
    if config.task == Task::SyntheticLogistic {
        return run_synthetic(config, seed, dir);
    }
    let spec = config.task_spec()?;
    let dataset = load_dataset(config)?;
    let (mut model, pretrain_loss) = prepare_model(config, &dataset, seed)?;
    let backbone = model.backbone_checksum();
    let mut sched = SchedulerState::new(config.scheduler.clone(), config.optimizer.kappa)?;
    let mut opt = CommitOptimizer::new(&model, config.optimizer.clone())?;

    let meta = RunMeta {
        schema_version: SCHEMA_VERSION,
        name: config.name.clone(),
        method: config.method.clone(),
        task: config.task,
        seed,
        strategy: serde_json::to_value(config.scheduler.strategy)?.as_str().unwrap_or_default().to_string(),
        regularizer: config.optimizer.reg.enabled,
        lambda: config.optimizer.reg.lambda,
        backend: config.optimizer.backend,
        columns: COLUMNS.iter().map(|s| s.to_string()).collect(),
        extra_columns: EXTRA_COLUMNS.iter().map(|s| s.to_string()).collect(),
        backbone_checksum: backbone.clone(),
        pretrain_final_loss: pretrain_loss,
        completed: false,
        aborted: None,
    };
    let mut sinks = dir.map(|d| Sinks::open(d, config, meta)).transpose()?;
    if let Some(s) = &sinks {
        save_checkpoint(&model, &s.dir)?;
    }

    let mut log = RunLog::default();
    let result = (|| -> Result<()> {
        for step in 0..=config.steps {
            let batch = sample_batch(&dataset, seed, step, config.batch_size);
            let rates = sched.rates_for(step)?;
            let apply = step < config.steps;
            let report = opt.step(&mut model, &batch, rates, step, apply)?;
            let kappa_ma = sched.observe(step, report.record.kappa, report.update_norms[0], report.update_norms[1])?;
            let mut record = report.record.clone();
            record.kappa_ma = kappa_ma;
            if step % config.eval_every == 0 || step == config.steps {
                record.eval_acc = Some(evaluate(&model, &spec, &dataset.eval)?);
                if model.backbone_checksum() != backbone {
                    return Err(Error::contract(format!("backbone changed by step {step}")));
                }
            }
            record.check()?;
            let extras = StepExtras {
                step,
                update_norms: report.update_norms,
                kappa_degenerate: report.kappa_degenerate,
                d_s_after_t: report.triangle.map(|t| t.d_s_after_t),
                triangle_literal: report.triangle.map(|t| t.literal_ok),
                triangle_same_point: report.triangle.map(|t| t.same_point_ok),
                ops: report.ops,
                diagnostic_forwards: report.diagnostic_forwards,
                grad_norms: [report.loss_grads[0].norm(), report.loss_grads[1].norm()],
                combined_norms: [report.combined[0].norm(), report.combined[1].norm()],
            };
            if let Some(s) = sinks.as_mut() {
                for e in &sched.events[log.events.len()..] {
                    serde_json::to_writer(&mut s.events, e)?;
                    s.events.write_all(b"\n")?;
                }
                if step % config.log_every == 0 || step == config.steps {
                    s.row(&record, &extras)?;
                }
                if apply && (step + 1) % config.checkpoint_every == 0 {
                    s.flush()?;
                    save_checkpoint(&model, &s.dir)?;
                }
            }
            log.events = sched.events.clone();
            if step % config.log_every == 0 || step == config.steps {
                log.records.push(record);
                log.extras.push(extras);
            }
        }
        Ok(())
    })();

    if let Some(s) = sinks.as_mut() {
        s.flush()?;
        match &result {
            Ok(()) => {
                save_checkpoint(&model, &s.dir)?;
                s.meta.completed = true;
            }
            Err(e) => s.meta.aborted = Some(e.to_string()),
        }
        s.write_meta()?;
    }
    result?;
    Ok(RunOutput {
        seed,
        dir: dir.map(Path::to_path_buf),
        log,
        bound: None,
    })
}

fn run_synthetic(config: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<RunOutput> {
    let cfg = &config.synthetic;
    let problem = LogisticProblem::generate(cfg.points, cfg.dim, seed)?;
    let traj = problem.run_adam(cfg, config.steps.max(1))?;
    let inputs = problem.strict_inputs(cfg, traj.steps());
    let verification = verify_trajectory(&traj, &inputs)?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        let mut own = config.clone();
        own.seeds = vec![seed];
        std::fs::write(d.join("config.toml"), own.to_toml()?)?;
        std::fs::write(d.join("trajectory.json"), serde_json::to_vec(&traj)?)?;
        std::fs::write(d.join("problem.json"), serde_json::to_vec(&problem)?)?;
        std::fs::write(d.join("verification.json"), serde_json::to_vec_pretty(&verification)?)?;
    }
    Ok(RunOutput {
        seed,
        dir: dir.map(Path::to_path_buf),
        log: RunLog::default(),
        bound: Some((traj, verification)),
    })
}

/// Runs every seed of `config` into `config.run_dir(seed)`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    config.validate()?;
    config
        .seeds
        .par_iter()
        .map(|&s| run_seed(config, s, Some(&config.run_dir(s))))
        .collect()
}

/// Runs several configs in parallel workers.
pub fn run_many(configs: &[ExperimentConfig]) -> Result<Vec<Vec<RunOutput>>> {
    configs.par_iter().map(run_experiment).collect()
}
