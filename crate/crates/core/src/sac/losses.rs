use std::borrow::Borrow;

use ndarray::ArrayView1;
use rand::Rng;
use rand_distr::StandardNormal;

use super::buffer::TransitionRecord;
use crate::contrastive::{contrastive_loss_tape, ContrastiveConfig};
use crate::diff::{squashed_gaussian, LstmState, Matrix, ParamGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::model::CmtaParams;

/// A training batch in matrix form. Rows are grouped by task in ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Matrix,
    pub actions: Matrix,
    /// `rows x 1`
    pub rewards: Matrix,
    pub next_states: Matrix,
    pub h_prev: Vec<LstmState>,
    pub h_curr: Vec<LstmState>,
    pub task_ids: Vec<usize>,
    /// `rows x 1`, 1.0 on true terminals.
    pub terminals: Matrix,
    /// `rows x 1` averaging weights: every present task counts equally and
    /// samples within a task are averaged.
    pub weights: Matrix,
}

impl Batch {
    pub fn from_records<R: Borrow<TransitionRecord>>(records: &[R]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::input("empty batch"))?.borrow();
        let (sd, ad) = (first.state.len(), first.action.len());
        let rows = records.len();
        let mut b = Batch {
            states: Matrix::zeros((rows, sd)),
            actions: Matrix::zeros((rows, ad)),
            rewards: Matrix::zeros((rows, 1)),
            next_states: Matrix::zeros((rows, sd)),
            h_prev: Vec::with_capacity(rows),
            h_curr: Vec::with_capacity(rows),
            task_ids: Vec::with_capacity(rows),
            terminals: Matrix::zeros((rows, 1)),
            weights: Matrix::zeros((rows, 1)),
        };
        for (r, rec) in records.iter().enumerate() {
            let rec = rec.borrow();
            if rec.state.len() != sd || rec.next_state.len() != sd || rec.action.len() != ad {
                return Err(Error::input("transition widths differ within the batch"));
            }
            b.states.row_mut(r).assign(&ArrayView1::from(&rec.state[..]));
            b.next_states.row_mut(r).assign(&ArrayView1::from(&rec.next_state[..]));
            b.actions.row_mut(r).assign(&ArrayView1::from(&rec.action[..]));
            b.rewards[[r, 0]] = rec.reward;
            b.terminals[[r, 0]] = if rec.terminal { 1.0 } else { 0.0 };
            b.h_prev.push(rec.h_prev.clone());
            b.h_curr.push(rec.h_curr.clone());
            b.task_ids.push(rec.task_id);
        }
        b.weights = task_weights(&b.task_ids);
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }
}

/// Row weights `1 / (tasks_present * rows_of_task)`, so a weighted sum of
/// per-row losses is the mean over tasks of each task's batch mean.
pub fn task_weights(task_ids: &[usize]) -> Matrix {
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for &t in task_ids {
        *counts.entry(t).or_default() += 1;
    }
    let present = counts.len() as f64;
    Matrix::from_shape_fn((task_ids.len(), 1), |(r, _)| 1.0 / (present * counts[&task_ids[r]] as f64))
}

/// Standard-normal draws for the two reparameterized samples in one update.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// For the fresh action at `s` in the actor and temperature losses.
    pub current: Matrix,
    /// For `a'` at `s'` in the critic target.
    pub next: Matrix,
}

impl Noise {
    pub fn sample<R: Rng + ?Sized>(rows: usize, action_dim: usize, rng: &mut R) -> Self {
        let mut draw = || Matrix::from_shape_fn((rows, action_dim), |_| rng.sample(StandardNormal));
        let current = draw();
        let next = draw();
        Self { current, next }
    }

    pub fn zeros(rows: usize, action_dim: usize) -> Self {
        Self {
            current: Matrix::zeros((rows, action_dim)),
            next: Matrix::zeros((rows, action_dim)),
        }
    }
}

/// Which loss terms enter the total for one update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub critic: bool,
    pub actor: bool,
    pub temperature: bool,
    pub contrastive: bool,
}

impl LossSwitches {
    pub const ALL: Self = Self {
        critic: true,
        actor: true,
        temperature: true,
        contrastive: true,
    };
    pub const NONE: Self = Self {
        critic: false,
        actor: false,
        temperature: false,
        contrastive: false,
    };
}

/// Scalar settings the losses need beyond the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub gamma: f64,
    pub beta: f64,
    pub target_entropy: f64,
    pub contrastive: ContrastiveConfig,
}

/// Scalar values of every term plus the variable of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSet {
    pub critic: f64,
    pub actor: f64,
    pub temperature: f64,
    /// Unweighted contrastive loss; `None` for single-expert models.
    pub contrastive: Option<f64>,
    pub total: f64,
    /// Weighted mean of `log pi` of the fresh action at `s`.
    pub log_prob: f64,
    pub total_var: Var,
}

/// Bootstrap targets `r + gamma (1 - terminal) (min Q'(z', a') - alpha log pi(a'|s'))`.
/// Computed on a separate tape, so they are constants for the update.
pub fn critic_targets(model: &CmtaParams, batch: &Batch, next_noise: &Matrix, gamma: f64) -> Result<Matrix> {
    let mut tape = Tape::new(&model.store);
    let s1 = tape.constant(batch.next_states.clone());
    let refs: Vec<&LstmState> = batch.h_curr.iter().collect();
    let prev = model.state_vars(&mut tape, &refs);
    let f = model.forward_tape(&mut tape, s1, &batch.task_ids, prev)?;
    let (mean, log_std) = model.actor_tape(&mut tape, f.z)?;
    let nv = tape.constant(next_noise.clone());
    let sample = squashed_gaussian(&mut tape, mean, log_std, nv);
    let q1 = model.critic_tape(&mut tape, 0, true, f.z, sample.action)?;
    let q2 = model.critic_tape(&mut tape, 1, true, f.z, sample.action)?;
    let q = tape.min(q1, q2);
    let qm = tape.value(q);
    let lp = tape.value(sample.log_prob);
    let mut y = Matrix::zeros((batch.len(), 1));
    for r in 0..batch.len() {
        let alpha = model.temperature(batch.task_ids[r]);
        let soft = qm[[r, 0]] - alpha * lp[[r, 0]];
        y[[r, 0]] = batch.rewards[[r, 0]] + gamma * (1.0 - batch.terminals[[r, 0]]) * soft;
    }
    Ok(y)
}

/// Builds every loss term on `tape`. Gradient routing is encoded in the graph:
///
/// * contrastive loss reads only expert outputs;
/// * the actor sees a detached representation and frozen critics;
/// * critic regression flows through the whole shared path into critics;
/// * the temperature loss treats `log pi` as a constant.
///
/// One backward pass over `total_var` therefore yields each group's gradient
/// from exactly the losses allowed to update it.
pub fn build_losses(
    tape: &mut Tape<'_>,
    model: &CmtaParams,
    batch: &Batch,
    targets: &Matrix,
    noise: &Matrix,
    settings: &LossSettings,
    switches: LossSwitches,
) -> Result<LossSet> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let weights = &batch.weights;
    let states = tape.constant(batch.states.clone());
    let refs: Vec<&LstmState> = batch.h_prev.iter().collect();
    let prev = model.state_vars(tape, &refs);
    let f = model.forward_tape(tape, states, &batch.task_ids, prev)?;

    // critic regression
    let actions = tape.constant(batch.actions.clone());
    let y = tape.constant(targets.clone());
    let mut critic_terms = Vec::with_capacity(2);
    for which in 0..2 {
        let q = model.critic_tape(tape, which, false, f.z, actions)?;
        let err = tape.sub(q, y);
        let sq = tape.mul(err, err);
        critic_terms.push(tape.weighted_sum(sq, weights.clone()));
    }
    let critic_sum = tape.add(critic_terms[0], critic_terms[1]);
    let critic = tape.scale(critic_sum, 0.5);

    // policy improvement through frozen critics
    let z_detached = tape.detach(f.z);
    let (mean, log_std) = model.actor_tape(tape, z_detached)?;
    let nv = tape.constant(noise.clone());
    let sample = squashed_gaussian(tape, mean, log_std, nv);
    let q1 = model.critic_tape_with(tape, 0, false, z_detached, sample.action, true)?;
    let q2 = model.critic_tape_with(tape, 1, false, z_detached, sample.action, true)?;
    let q_min = tape.min(q1, q2);
    let inv_alpha = Matrix::from_shape_fn((batch.len(), 1), |(r, _)| 1.0 / model.temperature(batch.task_ids[r]));
    let inv_alpha = tape.constant(inv_alpha);
    let scaled_q = tape.mul_col(q_min, inv_alpha);
    let actor_rows = tape.sub(sample.log_prob, scaled_q);
    let actor = tape.weighted_sum(actor_rows, weights.clone());
    let log_prob = tape.value(sample.log_prob).clone();
    let mean_log_prob = (&log_prob * weights).sum();

    // per-task temperature
    let log_alpha_table = tape.param(model.log_temperature);
    let log_alpha = tape.gather_rows(log_alpha_table, &batch.task_ids);
    let gap = tape.constant(log_prob.mapv(|lp| -(lp + settings.target_entropy)));
    let temp_rows = tape.mul(log_alpha, gap);
    let temperature = tape.weighted_sum(temp_rows, weights.clone());

    // expert diversity
    let contrastive = if model.n_experts() >= 2 {
        let s1 = tape.constant(batch.next_states.clone());
        let enc_t1 = model.encode_experts_tape(tape, s1)?;
        Some(contrastive_loss_tape(tape, &f.encodings, &enc_t1, settings.contrastive, weights.clone())?)
    } else {
        None
    };

    let mut parts: Vec<Var> = Vec::new();
    if switches.critic {
        parts.push(critic);
    }
    if switches.actor {
        parts.push(actor);
    }
    if switches.temperature {
        parts.push(temperature);
    }
    if let (true, Some(c)) = (switches.contrastive, contrastive) {
        parts.push(tape.scale(c, settings.beta));
    }
    let total_var = match parts.split_first() {
        None => tape.constant(Matrix::zeros((1, 1))),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &p| tape.add(acc, p)),
    };
    Ok(LossSet {
        critic: tape.scalar(critic),
        actor: tape.scalar(actor),
        temperature: tape.scalar(temperature),
        contrastive: contrastive.map(|c| tape.scalar(c)),
        total: tape.scalar(total_var),
        log_prob: mean_log_prob,
        total_var,
    })
}

/// Losses and gradients of one update without touching the parameters.
pub fn loss_and_grads(
    model: &CmtaParams,
    batch: &Batch,
    noise: &Noise,
    settings: &LossSettings,
    switches: LossSwitches,
) -> Result<(LossSet, ParamGrads)> {
    let targets = critic_targets(model, batch, &noise.next, settings.gamma)?;
    let mut tape = Tape::new(&model.store);
    let losses = build_losses(&mut tape, model, batch, &targets, &noise.current, settings, switches)?;
    let grads = tape.backward(losses.total_var);
    Ok((losses, grads))
}

/// Twin critic regression loss on a batch.
pub fn critic_loss(model: &CmtaParams, batch: &Batch, noise: &Noise, gamma: f64) -> Result<f64> {
    Ok(evaluate(model, batch, noise, gamma)?.critic)
}

/// Reparameterized policy loss on a batch.
pub fn actor_loss(model: &CmtaParams, batch: &Batch, noise: &Noise) -> Result<f64> {
    Ok(evaluate(model, batch, noise, 0.0)?.actor)
}

/// Per-task temperature loss on a batch.
pub fn temperature_loss(model: &CmtaParams, batch: &Batch, noise: &Noise, target_entropy: f64) -> Result<f64> {
    let settings = LossSettings {
        gamma: 0.0,
        beta: 0.0,
        target_entropy,
        contrastive: ContrastiveConfig::default(),
    };
    let targets = critic_targets(model, batch, &noise.next, 0.0)?;
    let mut tape = Tape::new(&model.store);
    Ok(build_losses(&mut tape, model, batch, &targets, &noise.current, &settings, LossSwitches::NONE)?.temperature)
}

fn evaluate(model: &CmtaParams, batch: &Batch, noise: &Noise, gamma: f64) -> Result<LossSet> {
    let settings = LossSettings {
        gamma,
        beta: 0.0,
        target_entropy: -(model.config.action_dim as f64),
        contrastive: ContrastiveConfig::default(),
    };
    let targets = critic_targets(model, batch, &noise.next, gamma)?;
    let mut tape = Tape::new(&model.store);
    build_losses(&mut tape, model, batch, &targets, &noise.current, &settings, LossSwitches::NONE)
}

/// Every task counts equally: the plain mean of the per-task losses.
pub fn task_total_loss(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::input("no task losses to combine"));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Combined loss of one task: `rl + beta * contrastive`.
pub fn task_loss(rl: f64, contrastive: f64, beta: f64) -> f64 {
    rl + beta * contrastive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ParamGroup;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro(n_tasks: usize) -> CmtaParams {
        let mut c = ModelConfig::new(4, 2, n_tasks);
        c.n_experts = 3;
        c.expert_layers = vec![5];
        c.task_embedding_dim = 3;
        c.task_layers = vec![4];
        c.lstm_hidden = 3;
        c.actor_hidden = vec![6];
        c.critic_hidden = vec![6];
        CmtaParams::new(c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn record(task: usize, rng: &mut ChaCha8Rng, h: usize) -> TransitionRecord {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        TransitionRecord {
            state: v(4),
            action: v(2),
            reward: v(1)[0],
            next_state: v(4),
            h_prev: LstmState { hidden: v(h), cell: v(h) },
            h_curr: LstmState { hidden: v(h), cell: v(h) },
            task_id: task,
            terminal: false,
            timeout: false,
        }
    }

    fn batch(model: &CmtaParams, tasks: &[usize], seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs: Vec<TransitionRecord> = tasks.iter().map(|&t| record(t, &mut rng, model.config.lstm_hidden)).collect();
        Batch::from_records(&recs).unwrap()
    }

    /// Sets the final layer of both critics to a constant output.
    fn constant_critics(model: &mut CmtaParams, value: f64) {
        for net in model.critics.iter().chain(model.target_critics.iter()) {
            let last = net.layers.last().unwrap();
            model.store.values_mut(last.weight).fill(0.0);
            model.store.values_mut(last.bias).fill(value);
        }
    }

    #[test]
    fn weights_average_tasks_equally() {
        let w = task_weights(&[0, 0, 0, 1]);
        assert!((w[[0, 0]] - 1.0 / 6.0).abs() < 1e-15);
        assert!((w[[3, 0]] - 0.5).abs() < 1e-15);
        assert!((w.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_reward_zero_q_gives_zero_critic_loss() {
        let mut m = micro(1);
        constant_critics(&mut m, 0.0);
        let mut b = batch(&m, &[0, 0, 0], 1);
        b.rewards.fill(0.0);
        let n = Noise::zeros(3, 2);
        assert_eq!(critic_loss(&m, &b, &n, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn terminal_drops_bootstrap() {
        let mut m = micro(1);
        constant_critics(&mut m, 1.0);
        let mut b = batch(&m, &[0], 2);
        b.rewards.fill(0.0);
        b.terminals.fill(1.0);
        let n = Noise::zeros(1, 2);
        let loss = critic_loss(&m, &b, &n, 0.99).unwrap();
        // two critics, each 0.5 * (1 - 0)^2
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_keeps_the_mean() {
        let m = micro(1);
        let one = batch(&m, &[0], 4);
        let rec = TransitionRecord {
            state: one.states.row(0).to_vec(),
            action: one.actions.row(0).to_vec(),
            reward: one.rewards[[0, 0]],
            next_state: one.next_states.row(0).to_vec(),
            h_prev: one.h_prev[0].clone(),
            h_curr: one.h_curr[0].clone(),
            task_id: 0,
            terminal: false,
            timeout: false,
        };
        let two = Batch::from_records(&[&rec, &rec]).unwrap();
        let n1 = Noise::zeros(1, 2);
        let n2 = Noise::zeros(2, 2);
        let a = critic_loss(&m, &one, &n1, 0.9).unwrap();
        let b = critic_loss(&m, &two, &n2, 0.9).unwrap();
        assert!((a - b).abs() < 1e-12);
        let a = actor_loss(&m, &one, &n1).unwrap();
        let b = actor_loss(&m, &two, &n2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn actor_loss_reduces_to_log_prob_when_q_is_zero() {
        let mut m = micro(1);
        constant_critics(&mut m, 0.0);
        let b = batch(&m, &[0, 0], 5);
        let n = Noise::zeros(2, 2);
        let settings = LossSettings {
            gamma: 0.0,
            beta: 0.0,
            target_entropy: -2.0,
            contrastive: ContrastiveConfig::default(),
        };
        let y = Matrix::zeros((2, 1));
        let mut tape = Tape::new(&m.store);
        let l = build_losses(&mut tape, &m, &b, &y, &n.current, &settings, LossSwitches::NONE).unwrap();
        assert!((l.actor - l.log_prob).abs() < 1e-12);
    }

    #[test]
    fn huge_temperature_leaves_entropy_term() {
        let mut m = micro(1);
        m.store.values_mut(m.log_temperature).fill(60.0);
        let b = batch(&m, &[0, 0], 6);
        let n = Noise::zeros(2, 2);
        let settings = LossSettings {
            gamma: 0.0,
            beta: 0.0,
            target_entropy: -2.0,
            contrastive: ContrastiveConfig::default(),
        };
        let y = Matrix::zeros((2, 1));
        let mut tape = Tape::new(&m.store);
        let l = build_losses(&mut tape, &m, &b, &y, &n.current, &settings, LossSwitches::NONE).unwrap();
        assert!((l.actor - l.log_prob).abs() < 1e-9);
    }

    #[test]
    fn temperature_gradient_vanishes_at_target_and_is_per_task() {
        let m = micro(2);
        let b = batch(&m, &[0, 0, 1, 1], 7);
        let n = Noise::zeros(4, 2);
        let y = Matrix::zeros((4, 1));
        let probe = |target_entropy: f64, tasks: LossSwitches| {
            let settings = LossSettings {
                gamma: 0.0,
                beta: 0.0,
                target_entropy,
                contrastive: ContrastiveConfig::default(),
            };
            let mut tape = Tape::new(&m.store);
            let l = build_losses(&mut tape, &m, &b, &y, &n.current, &settings, tasks).unwrap();
            (l, tape.backward(l.total_var))
        };
        let temp_only = LossSwitches {
            temperature: true,
            ..LossSwitches::NONE
        };
        let (l, g) = probe(-2.0, temp_only);
        let ga = g.get(m.log_temperature).unwrap();
        assert!(ga.iter().all(|v| v.is_finite()));
        // per-task entropy gap decides the sign; shifting the target to the
        // batch's mean log-prob of a single-task batch zeroes it
        let single = batch(&m, &[1, 1], 8);
        let settings = |te| LossSettings {
            gamma: 0.0,
            beta: 0.0,
            target_entropy: te,
            contrastive: ContrastiveConfig::default(),
        };
        let y2 = Matrix::zeros((2, 1));
        let n2 = Noise::zeros(2, 2);
        let mut tape = Tape::new(&m.store);
        let base = build_losses(&mut tape, &m, &single, &y2, &n2.current, &settings(0.0), temp_only).unwrap();
        let mut tape = Tape::new(&m.store);
        let at_target =
            build_losses(&mut tape, &m, &single, &y2, &n2.current, &settings(-base.log_prob), temp_only).unwrap();
        let g = tape.backward(at_target.total_var);
        let ga = g.get(m.log_temperature).unwrap();
        assert_eq!(ga[[0, 0]], 0.0);
        assert!(ga[[1, 0]].abs() < 1e-12);
        assert!(l.temperature.is_finite());
    }

    #[test]
    fn entropy_below_target_raises_temperature() {
        let m = micro(1);
        let b = batch(&m, &[0, 0], 9);
        let n = Noise::zeros(2, 2);
        let y = Matrix::zeros((2, 1));
        let settings = LossSettings {
            gamma: 0.0,
            beta: 0.0,
            // entropy (-log pi) far below an extreme target
            target_entropy: 1e3,
            contrastive: ContrastiveConfig::default(),
        };
        let temp_only = LossSwitches {
            temperature: true,
            ..LossSwitches::NONE
        };
        let mut tape = Tape::new(&m.store);
        let l = build_losses(&mut tape, &m, &b, &y, &n.current, &settings, temp_only).unwrap();
        let g = tape.backward(l.total_var);
        // gradient descent on log alpha moves against the gradient
        assert!(g.get(m.log_temperature).unwrap()[[0, 0]] < 0.0);
    }

    #[test]
    fn groups_receive_grads_only_from_allowed_terms() {
        let m = micro(2);
        let b = batch(&m, &[0, 0, 1, 1], 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Noise::sample(4, 2, &mut rng);
        let settings = LossSettings {
            gamma: 0.9,
            beta: 2.0,
            target_entropy: -2.0,
            contrastive: ContrastiveConfig::default(),
        };
        let only = |f: fn(&mut LossSwitches)| {
            let mut s = LossSwitches::NONE;
            f(&mut s);
            let (_, g) = loss_and_grads(&m, &b, &n, &settings, s).unwrap();
            let mut groups: Vec<ParamGroup> = g.iter().map(|(id, _)| m.store.get(id).group).collect();
            groups.sort_by_key(|g| *g as usize);
            groups.dedup();
            groups
        };
        assert_eq!(only(|s| s.actor = true), vec![ParamGroup::Actor]);
        assert_eq!(only(|s| s.contrastive = true), vec![ParamGroup::Experts]);
        assert_eq!(only(|s| s.temperature = true), vec![ParamGroup::Temperature]);
        assert_eq!(
            only(|s| s.critic = true),
            vec![
                ParamGroup::Experts,
                ParamGroup::TaskEncoder,
                ParamGroup::Lstm,
                ParamGroup::Attention,
                ParamGroup::Critic
            ]
        );
    }

    #[test]
    fn total_is_plain_mean() {
        assert_eq!(task_total_loss(&[5.0]).unwrap(), 5.0);
        assert_eq!(task_total_loss(&[2.0, 4.0]).unwrap(), 3.0);
        assert!(task_total_loss(&[]).is_err());
        assert_eq!(task_loss(1.5, 7.0, 0.0), 1.5);
    }
}
