//! Fixtures shared by the benchmarks.

use cmta::diff::{LstmState, Matrix};
use cmta::envs::register_suite;
use cmta::model::{CmtaParams, ModelConfig};
use cmta::sac::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// The desk-scale model used for multi-task runs: six experts, 32-wide
/// encoders and 64-wide actor/critic networks.
pub fn desk_model_config(n_tasks: usize, n_experts: usize) -> ModelConfig {
    let mut c = ModelConfig::new(cmta::envs::OBS_DIM, cmta::envs::ACTION_DIM, n_tasks);
    c.n_experts = n_experts;
    c.expert_layers = vec![32, 32];
    c.task_embedding_dim = 16;
    c.task_layers = vec![32, 32];
    c.lstm_hidden = 32;
    c.actor_hidden = vec![64, 64];
    c.critic_hidden = vec![64, 64];
    c
}

pub fn desk_model(n_experts: usize) -> CmtaParams {
    CmtaParams::new(desk_model_config(3, n_experts), &mut ChaCha8Rng::seed_from_u64(0)).expect("valid config")
}

pub fn random_state(model: &CmtaParams, seed: u64) -> (Vec<f64>, LstmState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = (0..model.config.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = model.config.lstm_hidden;
    let hidden = LstmState {
        hidden: (0..h).map(|_| rng.random_range(-1.0..1.0)).collect(),
        cell: (0..h).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    (state, hidden)
}

/// A trainer on MT3-Mixed whose buffer already holds enough data to update.
pub fn warm_trainer(n_experts: usize, batch_per_task: usize) -> Trainer {
    let tasks = register_suite("MT3-Mixed").expect("known suite");
    let mut config = TrainConfig::new(tasks.len());
    config.batch_per_task = batch_per_task;
    config.warmup_steps = 0;
    let mut trainer = Trainer::new(desk_model_config(tasks.len(), n_experts), config, &tasks, 0).expect("valid");
    while trainer.ready().is_err() {
        trainer.collect_step().expect("collect");
    }
    trainer
}
