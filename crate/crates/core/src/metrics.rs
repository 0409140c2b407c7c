//! Success-rate evaluation and the smoothed-maximum summary metric.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Env, TaskSpec, VariantChoice};
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTH_FACTOR: f64 = 0.8;

/// Ordered `(step, value)` points with strictly increasing steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    points: Vec<(u64, f64)>,
}

impl MetricSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: &[f64]) -> Self {
        Self {
            points: values.iter().enumerate().map(|(i, &v)| (i as u64, v)).collect(),
        }
    }

    pub fn push(&mut self, step: u64, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if step <= last {
                return Err(Error::input(format!("step {step} does not follow {last}")));
            }
        }
        self.points.push((step, value));
        Ok(())
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max(&self) -> Option<f64> {
        self.points.iter().map(|p| p.1).reduce(f64::max)
    }
}

/// Exponential smoothing: `s[0] = p[0]`, `s[i] = s[i-1] * factor + p[i] * (1 - factor)`.
pub fn smooth(series: &MetricSeries, factor: f64) -> Result<MetricSeries> {
    if !(0.0..1.0).contains(&factor) {
        return Err(Error::input(format!("smoothing factor {factor} outside [0, 1)")));
    }
    let mut points = Vec::with_capacity(series.len());
    let mut prev: Option<f64> = None;
    for &(step, value) in series.points() {
        let s = match prev {
            None => value,
            Some(p) => p * factor + value * (1.0 - factor),
        };
        points.push((step, s));
        prev = Some(s);
    }
    Ok(MetricSeries { points })
}

/// Maximum of the smoothed series.
pub fn max_smoothed(series: &MetricSeries, factor: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::input("cannot summarize an empty series"));
    }
    Ok(smooth(series, factor)?.max().expect("non-empty"))
}

/// Anything that can act in an environment during evaluation.
pub trait Policy {
    /// Called at the start of every episode.
    fn begin_episode(&mut self, task_id: usize);
    fn act(&mut self, task_id: usize, env: &Env) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<f64>,
    pub mean_success: f64,
}

/// Runs `episodes_per_task` episodes per task and returns success rates.
/// Fixed tasks always reset to their single position set; mixed tasks draw a
/// set from `rng` each episode.
pub fn evaluate<P: Policy, R: Rng + ?Sized>(
    policy: &mut P,
    tasks: &[TaskSpec],
    episodes_per_task: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if episodes_per_task == 0 {
        return Err(Error::input("evaluation needs at least one episode per task"));
    }
    if tasks.is_empty() {
        return Err(Error::input("evaluation needs at least one task"));
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for (task_id, spec) in tasks.iter().enumerate() {
        let mut env = Env::new(spec.clone(), horizon);
        let mut successes = 0usize;
        for _ in 0..episodes_per_task {
            env.reset(VariantChoice::Random, rng)?;
            policy.begin_episode(task_id);
            loop {
                let action = policy.act(task_id, &env)?;
                let out = env.step(&action)?;
                if out.done {
                    successes += usize::from(out.success);
                    break;
                }
            }
        }
        per_task.push(successes as f64 / episodes_per_task as f64);
    }
    let mean_success = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(EvalReport { per_task, mean_success })
}

/// The hand-written controller as a [`Policy`].
#[derive(Debug, Default, Clone, Copy)]
pub struct ScriptedPolicy;

impl Policy for ScriptedPolicy {
    fn begin_episode(&mut self, _task_id: usize) {}

    fn act(&mut self, _task_id: usize, env: &Env) -> Result<Vec<f64>> {
        Ok(crate::envs::scripted_action(&env.spec, &env.state).to_vec())
    }
}
