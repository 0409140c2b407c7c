//! The composed encoder: K expert encoders, a task encoder, an LSTM carrying
//! temporal context, and an attention layer that mixes the expert encodings
//! at every step. Actor and twin critics sit on top of the composed
//! representation `z = z_task ‖ z_enc`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::layers::row;
use crate::diff::{Linear, LstmCell, LstmState, Matrix, Mlp, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Experts mixed by temporal attention.
    Cmta,
    /// Reference configuration: one encoder, no attention, no LSTM.
    SharedEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_tasks: usize,
    pub n_experts: usize,
    /// Widths of each expert's layers after the input, e.g. `[64, 64]`.
    pub expert_layers: Vec<usize>,
    pub task_embedding_dim: usize,
    /// Widths of the task encoder's FC stack after the embedding.
    pub task_layers: Vec<usize>,
    pub lstm_hidden: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// When false, attention sees a zero vector in place of the LSTM output.
    pub temporal: bool,
    pub init_log_temperature: f64,
}

impl ModelConfig {
    /// Defaults: six experts of FC 64 + FC 64, a task encoder of embedding
    /// 64 + FC 128 + FC 64 + FC 64, LSTM width 64, and actor/critic networks
    /// of three 512-unit layers.
    pub fn new(state_dim: usize, action_dim: usize, n_tasks: usize) -> Self {
        Self {
            architecture: Architecture::Cmta,
            state_dim,
            action_dim,
            n_tasks,
            n_experts: 6,
            expert_layers: vec![64, 64],
            task_embedding_dim: 64,
            task_layers: vec![128, 64, 64],
            lstm_hidden: 64,
            actor_hidden: vec![512, 512, 512],
            critic_hidden: vec![512, 512, 512],
            temporal: true,
            init_log_temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("n_tasks", self.n_tasks),
            ("n_experts", self.n_experts),
            ("task_embedding_dim", self.task_embedding_dim),
            ("lstm_hidden", self.lstm_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, layers) in [
            ("expert_layers", &self.expert_layers),
            ("task_layers", &self.task_layers),
        ] {
            if layers.is_empty() || layers.contains(&0) {
                return Err(Error::config(format!("{name} must be a non-empty list of positive widths")));
            }
        }
        for (name, layers) in [("actor_hidden", &self.actor_hidden), ("critic_hidden", &self.critic_hidden)] {
            if layers.contains(&0) {
                return Err(Error::config(format!("{name} widths must be positive")));
            }
        }
        match self.architecture {
            Architecture::Cmta if self.n_experts < 2 => Err(Error::config(
                "n_experts must be at least 2 for the attention architecture (contrastive loss needs negatives)",
            )),
            Architecture::SharedEncoder if self.n_experts != 1 => {
                Err(Error::config("the shared-encoder architecture uses exactly one expert"))
            }
            _ => Ok(()),
        }
    }

    pub fn encoding_dim(&self) -> usize {
        *self.expert_layers.last().expect("validated")
    }

    pub fn task_dim(&self) -> usize {
        *self.task_layers.last().expect("validated")
    }

    pub fn z_dim(&self) -> usize {
        self.task_dim() + self.encoding_dim()
    }
}

/// Every learnable tensor of the model together with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmtaParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub experts: Vec<Mlp>,
    pub task_embedding: ParamId,
    pub task_mlp: Mlp,
    pub lstm: Option<LstmCell>,
    pub attention: Option<Linear>,
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub target_critics: [Mlp; 2],
    /// One log-temperature per task, `n_tasks x 1`.
    pub log_temperature: ParamId,
}

impl CmtaParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;

        let mut expert_sizes = vec![c.state_dim];
        expert_sizes.extend(&c.expert_layers);
        let experts = (0..c.n_experts)
            .map(|j| Mlp::new(&mut store, &format!("expert{j}"), ParamGroup::Experts, &expert_sizes, rng))
            .collect();

        let bound = 1.0 / (c.n_tasks as f64).sqrt();
        let task_embedding = store.uniform(
            "task.embedding",
            ParamGroup::TaskEncoder,
            c.n_tasks,
            c.task_embedding_dim,
            bound,
            rng,
        );
        let mut task_sizes = vec![c.task_embedding_dim];
        task_sizes.extend(&c.task_layers);
        let task_mlp = Mlp::new(&mut store, "task.fc", ParamGroup::TaskEncoder, &task_sizes, rng);

        let (lstm, attention) = match c.architecture {
            Architecture::Cmta => (
                Some(LstmCell::new(&mut store, "lstm", ParamGroup::Lstm, c.state_dim, c.lstm_hidden, rng)),
                Some(Linear::new(
                    &mut store,
                    "attention",
                    ParamGroup::Attention,
                    c.task_dim() + c.lstm_hidden,
                    c.n_experts,
                    rng,
                )),
            ),
            Architecture::SharedEncoder => (None, None),
        };

        let mut actor_sizes = vec![c.z_dim()];
        actor_sizes.extend(&c.actor_hidden);
        actor_sizes.push(2 * c.action_dim);
        let actor = Mlp::new(&mut store, "actor", ParamGroup::Actor, &actor_sizes, rng);

        let mut critic_sizes = vec![c.z_dim() + c.action_dim];
        critic_sizes.extend(&c.critic_hidden);
        critic_sizes.push(1);
        let critics = [0, 1].map(|k| Mlp::new(&mut store, &format!("critic{k}"), ParamGroup::Critic, &critic_sizes, rng));
        let target_critics = [0, 1].map(|k| {
            Mlp::new(&mut store, &format!("target_critic{k}"), ParamGroup::TargetCritic, &critic_sizes, rng)
        });
        for (src, dst) in critics.iter().zip(&target_critics) {
            for (s, d) in src.params().into_iter().zip(dst.params()) {
                store.copy_values(s, d);
            }
        }

        let log_temperature = store.zeros("log_temperature", ParamGroup::Temperature, c.n_tasks, 1);
        store.values_mut(log_temperature).fill(c.init_log_temperature);

        Ok(Self {
            config,
            store,
            experts,
            task_embedding,
            task_mlp,
            lstm,
            attention,
            actor,
            critics,
            target_critics,
            log_temperature,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn temperature(&self, task_id: usize) -> f64 {
        self.store.values(self.log_temperature)[[task_id, 0]].exp()
    }

    fn check_task(&self, task_id: usize) -> Result<()> {
        if task_id >= self.config.n_tasks {
            return Err(Error::input(format!(
                "task id {task_id} out of range (model has {} tasks)",
                self.config.n_tasks
            )));
        }
        Ok(())
    }

    fn check_state(&self, width: usize) -> Result<()> {
        if width != self.config.state_dim {
            return Err(Error::config(format!(
                "state has {width} entries but the experts expect {}",
                self.config.state_dim
            )));
        }
        Ok(())
    }

    // ---- batched tape API ---------------------------------------------------

    /// Expert encodings of a batch of states, one `rows x d` matrix per expert.
    pub fn encode_experts_tape(&self, tape: &mut Tape<'_>, states: Var) -> Result<Vec<Var>> {
        self.check_state(tape.shape(states).1)?;
        self.experts.iter().map(|e| e.forward(tape, states)).collect()
    }

    pub fn encode_task_tape(&self, tape: &mut Tape<'_>, task_ids: &[usize]) -> Result<Var> {
        for &t in task_ids {
            self.check_task(t)?;
        }
        let table = tape.param(self.task_embedding);
        let rows = tape.gather_rows(table, task_ids);
        self.task_mlp.forward(tape, rows)
    }

    /// Attention weights from `(z_task, h)`; `rows x K`.
    pub fn attention_tape(&self, tape: &mut Tape<'_>, z_task: Var, hidden: Var) -> Result<Var> {
        let layer = self
            .attention
            .as_ref()
            .ok_or_else(|| Error::config("the shared-encoder architecture has no attention layer"))?;
        let joint = tape.concat_cols(&[z_task, hidden]);
        let logits = layer.forward(tape, joint);
        Ok(tape.softmax_rows(logits))
    }

    /// Weighted sum of encodings with per-row weights `alpha` (`rows x K`).
    pub fn compose_tape(tape: &mut Tape<'_>, encodings: &[Var], alpha: Var) -> Var {
        let mut acc: Option<Var> = None;
        for (j, &e) in encodings.iter().enumerate() {
            let a = tape.slice_cols(alpha, j, 1);
            let term = tape.mul_col(e, a);
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term),
            });
        }
        acc.expect("at least one encoding")
    }

    /// Full shared forward path on a batch. `prev` is the `(hidden, cell)`
    /// pair of the LSTM before this step.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<'_>,
        states: Var,
        task_ids: &[usize],
        prev: (Var, Var),
    ) -> Result<BatchForward> {
        let rows = tape.shape(states).0;
        if task_ids.len() != rows {
            return Err(Error::input("one task id is needed per state row"));
        }
        let encodings = self.encode_experts_tape(tape, states)?;
        let z_task = self.encode_task_tape(tape, task_ids)?;
        let (alpha, z_enc, new_state) = match self.config.architecture {
            Architecture::SharedEncoder => {
                let ones = tape.constant(Matrix::ones((rows, 1)));
                (ones, encodings[0], None)
            }
            Architecture::Cmta => {
                let lstm = self.lstm.as_ref().expect("attention architecture has an lstm");
                let (h, c) = lstm.forward(tape, states, prev.0, prev.1)?;
                let attn_input = if self.config.temporal {
                    h
                } else {
                    tape.constant(Matrix::zeros((rows, self.config.lstm_hidden)))
                };
                let alpha = self.attention_tape(tape, z_task, attn_input)?;
                let z_enc = Self::compose_tape(tape, &encodings, alpha);
                (alpha, z_enc, Some((h, c)))
            }
        };
        let z = tape.concat_cols(&[z_task, z_enc]);
        Ok(BatchForward {
            z_task,
            encodings,
            alpha,
            z_enc,
            z,
            new_state,
        })
    }

    /// Actor head: `(mean, log_std)` before squashing and clamping.
    pub fn actor_tape(&self, tape: &mut Tape<'_>, z: Var) -> Result<(Var, Var)> {
        let out = self.actor.forward(tape, z)?;
        let a = self.config.action_dim;
        let mean = tape.slice_cols(out, 0, a);
        let log_std = tape.slice_cols(out, a, a);
        Ok((mean, log_std))
    }

    pub fn critic_tape(&self, tape: &mut Tape<'_>, which: usize, target: bool, z: Var, action: Var) -> Result<Var> {
        self.critic_tape_with(tape, which, target, z, action, false)
    }

    /// Critic evaluation; `frozen` blocks gradients into the critic's tensors.
    pub fn critic_tape_with(
        &self,
        tape: &mut Tape<'_>,
        which: usize,
        target: bool,
        z: Var,
        action: Var,
        frozen: bool,
    ) -> Result<Var> {
        let net = if target { &self.target_critics[which] } else { &self.critics[which] };
        let input = tape.concat_cols(&[z, action]);
        net.forward_with(tape, input, frozen)
    }

    /// LSTM state rows for the tape, zeros for the shared-encoder model.
    pub fn state_vars(&self, tape: &mut Tape<'_>, states: &[&LstmState]) -> (Var, Var) {
        let h = self.config.lstm_hidden;
        let mut hm = Matrix::zeros((states.len(), h));
        let mut cm = Matrix::zeros((states.len(), h));
        for (r, s) in states.iter().enumerate() {
            if s.dim() == h {
                hm.row_mut(r).assign(&ndarray::ArrayView1::from(&s.hidden[..]));
                cm.row_mut(r).assign(&ndarray::ArrayView1::from(&s.cell[..]));
            }
        }
        (tape.constant(hm), tape.constant(cm))
    }

    // ---- single-sample API --------------------------------------------------

    pub fn zero_state(&self) -> LstmState {
        LstmState::zeros(self.config.lstm_hidden)
    }

    pub fn encode_experts(&self, state: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.store);
        let s = tape.constant(row(state));
        let enc = self.encode_experts_tape(&mut tape, s)?;
        Ok(enc.iter().map(|&e| to_vec(&tape, e)).collect())
    }

    pub fn encode_task(&self, task_id: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let z = self.encode_task_tape(&mut tape, &[task_id])?;
        Ok(to_vec(&tape, z))
    }

    pub fn temporal_step(&self, state: &[f64], prev: &LstmState) -> Result<LstmState> {
        let lstm = self
            .lstm
            .as_ref()
            .ok_or_else(|| Error::config("the shared-encoder architecture has no lstm"))?;
        self.check_state(state.len())?;
        crate::diff::lstm_step(&self.store, lstm, state, prev)
    }

    pub fn attention_weights(&self, z_task: &[f64], hidden: &[f64]) -> Result<AttentionWeights> {
        let mut tape = Tape::new(&self.store);
        let zt = tape.constant(row(z_task));
        let h = tape.constant(row(hidden));
        let alpha = self.attention_tape(&mut tape, zt, h)?;
        Ok(AttentionWeights {
            alpha: to_vec(&tape, alpha),
        })
    }

    pub fn forward(&self, state: &[f64], task_id: usize, prev: &LstmState) -> Result<ForwardOutput> {
        let mut tape = Tape::new(&self.store);
        let s = tape.constant(row(state));
        let pv = self.state_vars(&mut tape, &[prev]);
        let f = self.forward_tape(&mut tape, s, &[task_id], pv)?;
        let new_hidden = match f.new_state {
            Some((h, c)) => LstmState {
                hidden: to_vec(&tape, h),
                cell: to_vec(&tape, c),
            },
            None => prev.clone(),
        };
        Ok(ForwardOutput {
            z_task: to_vec(&tape, f.z_task),
            expert_encodings: f.encodings.iter().map(|&e| to_vec(&tape, e)).collect(),
            alpha: AttentionWeights {
                alpha: to_vec(&tape, f.alpha),
            },
            z_enc: to_vec(&tape, f.z_enc),
            z: to_vec(&tape, f.z),
            new_hidden,
        })
    }

    /// Batched action selection for rows `(state, task, prev_state)`.
    /// `noise` is `None` for the deterministic policy `tanh(mean)`.
    pub fn act(
        &self,
        states: &[Vec<f64>],
        task_ids: &[usize],
        prev: &[LstmState],
        noise: Option<&Matrix>,
    ) -> Result<(Vec<Vec<f64>>, Vec<LstmState>)> {
        let mut tape = Tape::new(&self.store);
        let rows = states.len();
        let mut sm = Matrix::zeros((rows, self.config.state_dim));
        for (r, s) in states.iter().enumerate() {
            self.check_state(s.len())?;
            sm.row_mut(r).assign(&ndarray::ArrayView1::from(&s[..]));
        }
        let sv = tape.constant(sm);
        let prev_refs: Vec<&LstmState> = prev.iter().collect();
        let pv = self.state_vars(&mut tape, &prev_refs);
        let f = self.forward_tape(&mut tape, sv, task_ids, pv)?;
        let (mean, log_std) = self.actor_tape(&mut tape, f.z)?;
        let action = match noise {
            None => tape.tanh(mean),
            Some(n) => {
                let nv = tape.constant(n.clone());
                crate::diff::squashed_gaussian(&mut tape, mean, log_std, nv).action
            }
        };
        let am = tape.value(action);
        let actions = am.rows().into_iter().map(|r| r.to_vec()).collect();
        let next = match f.new_state {
            Some((h, c)) => {
                let (hm, cm) = (tape.value(h), tape.value(c));
                (0..rows)
                    .map(|r| LstmState {
                        hidden: hm.row(r).to_vec(),
                        cell: cm.row(r).to_vec(),
                    })
                    .collect()
            }
            None => prev.to_vec(),
        };
        Ok((actions, next))
    }
}

/// Tape handles of one batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub z_task: Var,
    pub encodings: Vec<Var>,
    pub alpha: Var,
    pub z_enc: Var,
    pub z: Var,
    pub new_state: Option<(Var, Var)>,
}

/// A point on the probability simplex over experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub alpha: Vec<f64>,
}

impl AttentionWeights {
    pub fn is_valid(&self, tol: f64) -> bool {
        let sum: f64 = self.alpha.iter().sum();
        self.alpha.iter().all(|&a| a >= 0.0) && (sum - 1.0).abs() <= tol
    }
}

/// Every intermediate of a single-sample forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardOutput {
    pub z_task: Vec<f64>,
    pub expert_encodings: Vec<Vec<f64>>,
    pub alpha: AttentionWeights,
    pub z_enc: Vec<f64>,
    pub z: Vec<f64>,
    pub new_hidden: LstmState,
}

/// `sum_j alpha_j * encodings[j]`.
pub fn compose(encodings: &[Vec<f64>], alpha: &AttentionWeights) -> Result<Vec<f64>> {
    if encodings.len() != alpha.alpha.len() {
        return Err(Error::input(format!(
            "{} encodings but {} attention weights",
            encodings.len(),
            alpha.alpha.len()
        )));
    }
    let d = encodings.first().map_or(0, Vec::len);
    if encodings.iter().any(|e| e.len() != d) {
        return Err(Error::input("encodings must share a dimension"));
    }
    let mut out = vec![0.0; d];
    for (e, &a) in encodings.iter().zip(&alpha.alpha) {
        for (o, &x) in out.iter_mut().zip(e) {
            *o += a * x;
        }
    }
    Ok(out)
}

fn to_vec(tape: &Tape<'_>, v: Var) -> Vec<f64> {
    tape.value(v).iter().copied().collect()
}
