use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{ReplayBuffer, TransitionRecord};
use super::config::TrainConfig;
use super::losses::{loss_and_grads, Batch, LossSettings, LossSwitches, Noise};
use crate::diff::{Adam, LstmState, Matrix, ParamGroup};
use crate::envs::{Env, TaskSpec, VariantChoice};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, Policy};
use crate::model::{CmtaParams, ModelConfig};

/// Outcome of one update. `performed` is false when the buffer could not
/// supply a full batch yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub performed: bool,
    pub skipped_reason: Option<String>,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature_loss: f64,
    pub contrastive_loss: Option<f64>,
    pub total_loss: f64,
    pub mean_log_prob: f64,
    pub temperatures: Vec<f64>,
}

impl TrainDiagnostics {
    fn skipped(reason: String) -> Self {
        Self {
            performed: false,
            skipped_reason: Some(reason),
            critic_loss: 0.0,
            actor_loss: 0.0,
            temperature_loss: 0.0,
            contrastive_loss: None,
            total_loss: 0.0,
            mean_log_prob: 0.0,
            temperatures: Vec::new(),
        }
    }
}

/// Per-task summary of one collection round.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectReport {
    pub rewards: Vec<f64>,
    /// `Some(success)` for tasks whose episode ended this step.
    pub finished: Vec<Option<bool>>,
}

/// Owns everything that evolves during training. Serializable as a whole so
/// a checkpoint can resume bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub model: CmtaParams,
    pub config: TrainConfig,
    pub adam: Adam,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    envs: Vec<Env>,
    hidden: Vec<LstmState>,
    env_steps: u64,
    train_steps: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, tasks: &[TaskSpec], seed: u64) -> Result<Self> {
        config.validate()?;
        if tasks.len() != config.n_tasks || model_config.n_tasks != config.n_tasks {
            return Err(Error::config(format!(
                "task count mismatch: suite has {}, training config {}, model {}",
                tasks.len(),
                config.n_tasks,
                model_config.n_tasks
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CmtaParams::new(model_config, &mut rng)?;
        let adam = Adam::new(&model.store, config.adam_beta1, config.adam_beta2);
        let buffer = ReplayBuffer::new(config.buffer_capacity, config.n_tasks)?;
        let mut envs: Vec<Env> = tasks.iter().map(|t| Env::new(t.clone(), config.horizon)).collect();
        for env in &mut envs {
            env.reset(VariantChoice::Random, &mut rng)?;
        }
        let hidden = vec![model.zero_state(); tasks.len()];
        Ok(Self {
            model,
            config,
            adam,
            buffer,
            rng,
            envs,
            hidden,
            env_steps: 0,
            train_steps: 0,
        })
    }

    /// Env steps taken per task.
    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        self.envs.iter().map(|e| e.spec.clone()).collect()
    }

    pub fn hidden_states(&self) -> &[LstmState] {
        &self.hidden
    }

    /// One step in every task environment; appends one record per task.
    pub fn collect_step(&mut self) -> Result<CollectReport> {
        let n = self.envs.len();
        let action_dim = self.model.config.action_dim;
        let observations: Vec<Vec<f64>> = self.envs.iter().map(Env::observation).collect();
        let task_ids: Vec<usize> = (0..n).collect();
        let warmup = self.env_steps < self.config.warmup_steps;
        let noise = if warmup {
            None
        } else {
            Some(Noise::sample(n, action_dim, &mut self.rng).current)
        };
        let zero = Matrix::zeros((n, action_dim));
        let (policy_actions, next_hidden) =
            self.model
                .act(&observations, &task_ids, &self.hidden, Some(noise.as_ref().unwrap_or(&zero)))?;
        let actions: Vec<Vec<f64>> = if warmup {
            (0..n)
                .map(|_| (0..action_dim).map(|_| self.rng.random_range(-1.0..=1.0)).collect())
                .collect()
        } else {
            policy_actions
        };

        let mut report = CollectReport {
            rewards: Vec::with_capacity(n),
            finished: Vec::with_capacity(n),
        };
        for task in 0..n {
            let out = self.envs[task]
                .step(&actions[task])
                .map_err(|e| Error::Environment(format!("task {task}: {e}")))?;
            self.buffer.push(TransitionRecord {
                state: observations[task].clone(),
                action: actions[task].clone(),
                reward: out.reward,
                next_state: out.observation.clone(),
                h_prev: self.hidden[task].clone(),
                h_curr: next_hidden[task].clone(),
                task_id: task,
                terminal: out.success,
                timeout: out.timeout && !out.success,
            })?;
            report.rewards.push(out.reward);
            if out.done {
                report.finished.push(Some(out.success));
                self.envs[task].reset(VariantChoice::Random, &mut self.rng)?;
                self.hidden[task] = self.model.zero_state();
            } else {
                report.finished.push(None);
                self.hidden[task] = next_hidden[task].clone();
            }
        }
        self.env_steps += 1;
        Ok(report)
    }

    pub fn ready(&self) -> std::result::Result<(), String> {
        let need = self.config.batch_per_task;
        for task in 0..self.buffer.n_tasks() {
            let have = self.buffer.task_len(task);
            if have < need {
                return Err(format!("task {task} has {have} stored transitions, {need} needed"));
            }
        }
        Ok(())
    }

    pub fn train_step(&mut self) -> Result<TrainDiagnostics> {
        let contrastive = self.config.contrastive && self.config.effective_beta() > 0.0;
        self.train_step_with(LossSwitches {
            contrastive,
            ..LossSwitches::ALL
        })
    }

    /// One gradient update with only the selected loss terms, followed by
    /// the target update.
    pub fn train_step_with(&mut self, switches: LossSwitches) -> Result<TrainDiagnostics> {
        if let Err(reason) = self.ready() {
            return Ok(TrainDiagnostics::skipped(reason));
        }
        let records = self.buffer.sample_stratified(self.config.batch_per_task, &mut self.rng)?;
        let batch = Batch::from_records(&records)?;
        let noise = Noise::sample(batch.len(), self.model.config.action_dim, &mut self.rng);
        let settings = LossSettings {
            gamma: self.config.gamma,
            beta: self.config.effective_beta(),
            target_entropy: self.config.target_entropy(self.model.config.action_dim),
            contrastive: self.config.contrastive_params,
        };
        let (losses, grads) = loss_and_grads(&self.model, &batch, &noise, &settings, switches)?;
        if !losses.total.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at update {}", self.train_steps)));
        }
        let c = &self.config;
        let (lr_actor, lr_critic, lr_temperature) = (c.lr_actor, c.lr_critic, c.lr_temperature);
        self.adam.apply(&mut self.model.store, &grads, |group| match group {
            ParamGroup::Actor => Some(lr_actor),
            ParamGroup::Temperature => Some(lr_temperature),
            ParamGroup::TargetCritic | ParamGroup::Free => None,
            _ => Some(lr_critic),
        });
        self.update_targets();
        self.model.store.check_finite()?;
        self.train_steps += 1;
        Ok(TrainDiagnostics {
            performed: true,
            skipped_reason: None,
            critic_loss: losses.critic,
            actor_loss: losses.actor,
            temperature_loss: losses.temperature,
            contrastive_loss: losses.contrastive,
            total_loss: losses.total,
            mean_log_prob: losses.log_prob,
            temperatures: (0..self.config.n_tasks).map(|t| self.model.temperature(t)).collect(),
        })
    }

    /// `target <- (1 - polyak) target + polyak critic`
    pub fn update_targets(&mut self) {
        let tau = self.config.polyak;
        for k in 0..2 {
            let pairs: Vec<_> = self.model.critics[k]
                .params()
                .into_iter()
                .zip(self.model.target_critics[k].params())
                .collect();
            for (src, dst) in pairs {
                self.model.store.polyak(src, dst, tau);
            }
        }
    }

    /// Deterministic-policy evaluation on the given task list.
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        tasks: &[TaskSpec],
        episodes: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<EvalReport> {
        evaluate_model(&self.model, tasks, episodes, horizon, rng)
    }
}

/// Runs the deterministic policy `tanh(mean)`, carrying the LSTM state
/// through each episode.
#[derive(Debug, Clone)]
pub struct GreedyPolicy<'m> {
    model: &'m CmtaParams,
    hidden: LstmState,
}

impl<'m> GreedyPolicy<'m> {
    pub fn new(model: &'m CmtaParams) -> Self {
        Self {
            hidden: model.zero_state(),
            model,
        }
    }

    pub fn hidden(&self) -> &LstmState {
        &self.hidden
    }
}

impl Policy for GreedyPolicy<'_> {
    fn begin_episode(&mut self, _task_id: usize) {
        self.hidden = self.model.zero_state();
    }

    fn act(&mut self, task_id: usize, env: &Env) -> Result<Vec<f64>> {
        let (mut actions, mut next) =
            self.model
                .act(&[env.observation()], &[task_id], std::slice::from_ref(&self.hidden), None)?;
        self.hidden = next.remove(0);
        Ok(actions.remove(0))
    }
}

pub fn evaluate_model<R: Rng + ?Sized>(
    model: &CmtaParams,
    tasks: &[TaskSpec],
    episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if tasks.len() != model.config.n_tasks {
        return Err(Error::input(format!(
            "model was built for {} tasks, suite has {}",
            model.config.n_tasks,
            tasks.len()
        )));
    }
    evaluate(&mut GreedyPolicy::new(model), tasks, episodes, horizon, rng)
}
