use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::error::{Error, Result};

/// Hyperparameters of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_tasks: usize,
    /// Samples drawn from each task's partition per update (batch is this
    /// times the number of tasks).
    pub batch_per_task: usize,
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_temperature: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Weight of the contrastive term.
    pub beta: f64,
    /// Contrastive regularizer on or off. Off is equivalent to `beta = 0`.
    pub contrastive: bool,
    pub contrastive_params: ContrastiveConfig,
    pub horizon: usize,
    /// Env steps per task taken with uniform random actions before the policy acts.
    pub warmup_steps: u64,
    /// Env steps per task between gradient updates.
    pub env_steps_per_train_step: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub polyak: f64,
    /// Defaults to `-action_dim` when absent.
    pub target_entropy: Option<f64>,
    pub buffer_capacity: usize,
}

impl TrainConfig {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n_tasks,
            batch_per_task: 128,
            gamma: 0.99,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_temperature: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            beta: 2500.0,
            contrastive: true,
            contrastive_params: ContrastiveConfig::default(),
            horizon: 150,
            warmup_steps: 1500,
            env_steps_per_train_step: 1,
            eval_every: 3000,
            eval_episodes: 20,
            polyak: 0.005,
            target_entropy: None,
            buffer_capacity: 5_000_000,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_per_task * self.n_tasks
    }

    pub fn target_entropy(&self, action_dim: usize) -> f64 {
        self.target_entropy.unwrap_or(-(action_dim as f64))
    }

    /// Contrastive weight actually applied.
    pub fn effective_beta(&self) -> f64 {
        if self.contrastive {
            self.beta
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_tasks", self.n_tasks as u64),
            ("batch_per_task", self.batch_per_task as u64),
            ("horizon", self.horizon as u64),
            ("env_steps_per_train_step", self.env_steps_per_train_step),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes as u64),
            ("buffer_capacity", self.buffer_capacity as u64),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1)"));
        }
        for (name, v) in [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_temperature", self.lr_temperature),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be a finite non-negative number")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::config("beta must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.polyak) {
            return Err(Error::config("polyak must lie in [0, 1]"));
        }
        self.contrastive_params.validate().map_err(|e| Error::config(e.to_string()))
    }
}
