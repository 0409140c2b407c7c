//! Multi-task soft actor-critic: replay memory, losses with per-group
//! gradient routing, the update loop and checkpoints.

pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod trainer;

pub use buffer::{ReplayBuffer, TransitionRecord};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use losses::{
    actor_loss, build_losses, critic_loss, critic_targets, loss_and_grads, task_loss, task_total_loss, task_weights,
    temperature_loss, Batch, LossSet, LossSettings, LossSwitches, Noise,
};
pub use trainer::{evaluate_model, CollectReport, GreedyPolicy, TrainDiagnostics, Trainer};
