//! Contrastive modules with temporal attention (CMTA) for multi-task
//! soft actor-critic, with a toy continuous-control suite.

pub mod contrastive;
pub mod diff;
pub mod envs;
pub mod error;
pub mod export;
pub mod metrics;
pub mod model;
pub mod run;
pub mod sac;

pub use error::{Error, Result};
