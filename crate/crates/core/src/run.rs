//! Run configuration and the training driver that produces the on-disk
//! artifacts of a run: resolved config, metrics CSV, checkpoints and summary.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::envs::{register_suite, TaskSpec, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::metrics::{max_smoothed, EvalReport, MetricSeries, DEFAULT_SMOOTH_FACTOR};
use crate::model::{Architecture, ModelConfig};
use crate::sac::{evaluate_model, Checkpoint, TrainConfig, Trainer};

pub const OUTPUT_ROOT_ENV: &str = "CMTA_OUTPUT_ROOT";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";
const LOCK_FILE: &str = ".lock";

/// Model settings that do not depend on the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub n_experts: usize,
    pub expert_layers: Vec<usize>,
    pub task_embedding_dim: usize,
    pub task_layers: Vec<usize>,
    pub lstm_hidden: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub temporal: bool,
    pub init_log_temperature: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(OBS_DIM, ACTION_DIM, 1);
        Self {
            architecture: m.architecture,
            n_experts: m.n_experts,
            expert_layers: m.expert_layers,
            task_embedding_dim: m.task_embedding_dim,
            task_layers: m.task_layers,
            lstm_hidden: m.lstm_hidden,
            actor_hidden: m.actor_hidden,
            critic_hidden: m.critic_hidden,
            temporal: m.temporal,
            init_log_temperature: m.init_log_temperature,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, n_tasks: usize) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            state_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            n_tasks,
            n_experts: self.n_experts,
            expert_layers: self.expert_layers.clone(),
            task_embedding_dim: self.task_embedding_dim,
            task_layers: self.task_layers.clone(),
            lstm_hidden: self.lstm_hidden,
            actor_hidden: self.actor_hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            temporal: self.temporal,
            init_log_temperature: self.init_log_temperature,
        }
    }
}

/// Training settings that do not depend on the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_per_task: usize,
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_temperature: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub beta: f64,
    pub contrastive: bool,
    pub tau: f64,
    pub normalize: bool,
    pub horizon: usize,
    pub warmup_steps: u64,
    pub env_steps_per_train_step: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub polyak: f64,
    pub target_entropy: Option<f64>,
    pub buffer_capacity: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(1);
        Self {
            batch_per_task: t.batch_per_task,
            gamma: t.gamma,
            lr_actor: t.lr_actor,
            lr_critic: t.lr_critic,
            lr_temperature: t.lr_temperature,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            beta: t.beta,
            contrastive: t.contrastive,
            tau: t.contrastive_params.tau,
            normalize: t.contrastive_params.normalize,
            horizon: t.horizon,
            warmup_steps: t.warmup_steps,
            env_steps_per_train_step: t.env_steps_per_train_step,
            eval_every: t.eval_every,
            eval_episodes: t.eval_episodes,
            polyak: t.polyak,
            target_entropy: t.target_entropy,
            buffer_capacity: t.buffer_capacity,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, n_tasks: usize) -> TrainConfig {
        TrainConfig {
            n_tasks,
            batch_per_task: self.batch_per_task,
            gamma: self.gamma,
            lr_actor: self.lr_actor,
            lr_critic: self.lr_critic,
            lr_temperature: self.lr_temperature,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            beta: self.beta,
            contrastive: self.contrastive,
            contrastive_params: ContrastiveConfig {
                tau: self.tau,
                normalize: self.normalize,
            },
            horizon: self.horizon,
            warmup_steps: self.warmup_steps,
            env_steps_per_train_step: self.env_steps_per_train_step,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            polyak: self.polyak,
            target_entropy: self.target_entropy,
            buffer_capacity: self.buffer_capacity,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub suite: String,
    pub seed: u64,
    /// Env steps per task.
    pub steps: u64,
    pub output_dir: PathBuf,
    pub checkpoint_every: u64,
    /// Store the replay buffer in checkpoints (needed for exact resumption,
    /// large for long runs).
    pub checkpoint_buffer: bool,
    /// Stop once an evaluation reaches this mean success rate.
    pub stop_at_success: Option<f64>,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suite: "MT3-Mixed".to_string(),
            seed: 0,
            steps: 2_400_000,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 50_000,
            checkpoint_buffer: false,
            stop_at_success: None,
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        register_suite(&self.suite).map_err(|e| match e {
            Error::Input(m) => Error::config(format!("suite: {m}")),
            other => other,
        })
    }

    pub fn model_config(&self, n_tasks: usize) -> ModelConfig {
        self.model.resolve(n_tasks)
    }

    pub fn train_config(&self, n_tasks: usize) -> TrainConfig {
        self.train.resolve(n_tasks)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tasks()?.len();
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        if let Some(s) = self.stop_at_success {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config("stop_at_success must lie in [0, 1]"));
            }
        }
        self.model_config(n).validate().map_err(|e| Error::config(format!("model: {e}")))?;
        self.train_config(n).validate().map_err(|e| Error::config(format!("train: {e}")))
    }
}

/// Relative output paths are placed under `$CMTA_OUTPUT_ROOT` when set.
pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Evaluation randomness depends only on the seed and step, so evaluations
/// never perturb the training stream and can be replayed from a checkpoint.
pub fn eval_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E7A1);
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub suite: String,
    pub seed: u64,
    pub final_step: u64,
    pub updates: u64,
    pub evaluations: usize,
    pub max: f64,
    #[serde(rename = "max_smoothed@0.8")]
    pub max_smoothed: f64,
    pub final_mean_success: f64,
    pub final_per_task: Vec<f64>,
    pub stopped_early: bool,
}

/// Trained state and results of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub series: MetricSeries,
    pub trainer: Trainer,
    pub output_dir: PathBuf,
}

/// Held for the lifetime of a run; removes the lock file on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn metrics_header() -> &'static str {
    "step,task_id,success_rate,mean_success_rate"
}

pub fn metrics_rows(step: u64, report: &EvalReport) -> String {
    let mut out = String::new();
    for (task, rate) in report.per_task.iter().enumerate() {
        let _ = writeln!(out, "{step},{task},{rate},{}", report.mean_success);
    }
    out
}

/// Trains according to `config`, writing artifacts into
/// `resolve_output_dir(config.output_dir)`. `progress` receives one line per
/// evaluation.
pub fn train(config: &RunConfig, mut progress: impl FnMut(&str)) -> Result<RunOutcome> {
    config.validate()?;
    let tasks = config.tasks()?;
    let n = tasks.len();
    let out_dir = resolve_output_dir(&config.output_dir);
    let _lock = DirLock::acquire(&out_dir)?;
    fs::write(out_dir.join(RESOLVED_CONFIG_FILE), config.to_toml_string()?)?;
    let ck_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;

    let t = config.train_config(n);
    let mut trainer = Trainer::new(config.model_config(n), t.clone(), &tasks, config.seed)?;
    let mut metrics = File::create(out_dir.join(METRICS_FILE))?;
    writeln!(metrics, "{}", metrics_header())?;
    let mut series = MetricSeries::new();
    let mut last: Option<EvalReport> = None;
    let mut stopped_early = false;

    let result = (|| -> Result<()> {
        while trainer.env_steps() < config.steps {
            trainer.collect_step()?;
            let step = trainer.env_steps();
            if step >= t.warmup_steps && step % t.env_steps_per_train_step == 0 {
                trainer.train_step()?;
            }
            let save = step % config.checkpoint_every == 0;
            if step % t.eval_every == 0 || step == config.steps {
                let report = trainer.evaluate(&tasks, t.eval_episodes, t.horizon, &mut eval_rng(config.seed, step))?;
                metrics.write_all(metrics_rows(step, &report).as_bytes())?;
                metrics.flush()?;
                series.push(step, report.mean_success)?;
                progress(&format!(
                    "step {step}: mean success {:.3} per task {:?}",
                    report.mean_success, report.per_task
                ));
                let reached = config.stop_at_success.is_some_and(|s| report.mean_success >= s);
                last = Some(report);
                if reached {
                    stopped_early = true;
                    break;
                }
            }
            if save {
                Checkpoint::new(&config.suite, config.seed, &trainer, config.checkpoint_buffer)?
                    .save(&ck_dir.join(format!("step_{step:09}.json")))?;
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        // keep the state that produced the fault for inspection
        let _ = Checkpoint::new(&config.suite, config.seed, &trainer, false)
            .and_then(|ck| ck.save(&out_dir.join("checkpoint_fault.json")));
        return Err(e);
    }

    let step = trainer.env_steps();
    let report = match last {
        Some(r) if series.points().last().map(|p| p.0) == Some(step) => r,
        _ => {
            let r = trainer.evaluate(&tasks, t.eval_episodes, t.horizon, &mut eval_rng(config.seed, step))?;
            metrics.write_all(metrics_rows(step, &r).as_bytes())?;
            series.push(step, r.mean_success)?;
            r
        }
    };
    Checkpoint::new(&config.suite, config.seed, &trainer, config.checkpoint_buffer)?
        .save(&out_dir.join(FINAL_CHECKPOINT))?;
    let summary = RunSummary {
        suite: config.suite.clone(),
        seed: config.seed,
        final_step: step,
        updates: trainer.train_steps(),
        evaluations: series.len(),
        max: series.max().unwrap_or(0.0),
        max_smoothed: max_smoothed(&series, DEFAULT_SMOOTH_FACTOR)?,
        final_mean_success: report.mean_success,
        final_per_task: report.per_task,
        stopped_early,
    };
    fs::write(
        out_dir.join(SUMMARY_FILE),
        toml::to_string(&summary).map_err(|e| Error::config(e.to_string()))?,
    )?;
    Ok(RunOutcome {
        summary,
        series,
        trainer,
        output_dir: out_dir,
    })
}

/// Evaluates a checkpoint the same way the training loop evaluated it at
/// the checkpoint's step, unless `episodes` overrides the episode count.
pub fn evaluate_checkpoint(ck: &Checkpoint, tasks: &[TaskSpec], episodes: Option<usize>) -> Result<EvalReport> {
    let t = &ck.trainer;
    let episodes = episodes.unwrap_or(t.config.eval_episodes);
    evaluate_model(
        &t.model,
        tasks,
        episodes,
        t.config.horizon,
        &mut eval_rng(ck.seed, t.env_steps()),
    )
}

/// Per-task report rows for `eval` output: `task_id,task,success_rate`.
pub fn eval_csv(tasks: &[TaskSpec], report: &EvalReport) -> String {
    let mut out = String::from("task_id,task,success_rate\n");
    for (i, (spec, rate)) in tasks.iter().zip(&report.per_task).enumerate() {
        let _ = writeln!(out, "{i},{},{rate}", spec.name);
    }
    let _ = writeln!(out, "mean,all,{}", report.mean_success);
    out
}
