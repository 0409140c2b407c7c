use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::LstmState;
use crate::error::{Error, Result};

/// One stored environment transition together with the recurrent state
/// before (`h_prev`) and after (`h_curr`) the step's LSTM update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub h_prev: LstmState,
    pub h_curr: LstmState,
    pub task_id: usize,
    /// True terminal: the bootstrap term is dropped.
    pub terminal: bool,
    /// The episode ended at the horizon; bootstrap is kept.
    pub timeout: bool,
}

/// Widths fixed by the first stored record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Layout {
    state: usize,
    action: usize,
    hidden: usize,
}

impl Layout {
    fn of(r: &TransitionRecord) -> Self {
        Self {
            state: r.state.len(),
            action: r.action.len(),
            hidden: r.h_prev.dim(),
        }
    }

    /// state, action, reward, next_state, four hidden vectors, two flags
    fn stride(&self) -> usize {
        2 * self.state + self.action + 4 * self.hidden + 3
    }
}

/// Records of one task packed into a flat array, oldest overwritten first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct Ring {
    data: Vec<f64>,
    len: usize,
    /// Slot the next insert overwrites once full.
    head: usize,
}

/// Replay memory split into one FIFO ring per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity_per_task: usize,
    layout: Option<Layout>,
    rings: Vec<Ring>,
}

impl ReplayBuffer {
    /// `capacity` is the total; each task gets an equal share (rounded up).
    pub fn new(capacity: usize, n_tasks: usize) -> Result<Self> {
        if capacity == 0 || n_tasks == 0 {
            return Err(Error::config("replay capacity and task count must be positive"));
        }
        Ok(Self {
            capacity_per_task: capacity.div_ceil(n_tasks),
            layout: None,
            rings: vec![Ring::default(); n_tasks],
        })
    }

    pub fn capacity_per_task(&self) -> usize {
        self.capacity_per_task
    }

    pub fn n_tasks(&self) -> usize {
        self.rings.len()
    }

    pub fn len(&self) -> usize {
        self.rings.iter().map(|r| r.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_len(&self, task: usize) -> usize {
        self.rings[task].len
    }

    pub fn push(&mut self, record: TransitionRecord) -> Result<()> {
        let task = record.task_id;
        if task >= self.rings.len() {
            return Err(Error::input(format!("task id {task} out of range")));
        }
        let layout = *self.layout.get_or_insert_with(|| Layout::of(&record));
        let widths_ok = Layout::of(&record) == layout
            && record.next_state.len() == layout.state
            && record.h_curr.dim() == layout.hidden
            && record.h_prev.cell.len() == layout.hidden
            && record.h_curr.cell.len() == layout.hidden;
        if !widths_ok {
            return Err(Error::input("transition widths differ from the stored records"));
        }
        let stride = layout.stride();
        let cap = self.capacity_per_task;
        let ring = &mut self.rings[task];
        let flags = [
            record.reward,
            if record.terminal { 1.0 } else { 0.0 },
            if record.timeout { 1.0 } else { 0.0 },
        ];
        let parts: [&[f64]; 7] = [
            &record.state,
            &record.action,
            &record.next_state,
            &record.h_prev.hidden,
            &record.h_prev.cell,
            &record.h_curr.hidden,
            &record.h_curr.cell,
        ];
        if ring.len < cap {
            for p in parts {
                ring.data.extend_from_slice(p);
            }
            ring.data.extend_from_slice(&flags);
            ring.len += 1;
        } else {
            let mut at = ring.head * stride;
            for p in parts.into_iter().chain([&flags[..]]) {
                ring.data[at..at + p.len()].copy_from_slice(p);
                at += p.len();
            }
            ring.head = (ring.head + 1) % cap;
        }
        Ok(())
    }

    /// Records of one task from oldest to newest.
    pub fn task_records(&self, task: usize) -> impl Iterator<Item = TransitionRecord> + '_ {
        let ring = &self.rings[task];
        let start = if ring.len < self.capacity_per_task { 0 } else { ring.head };
        (0..ring.len).map(move |k| self.get(task, (start + k) % ring.len))
    }

    /// Record in storage slot `index` of a task's ring.
    pub fn get(&self, task: usize, index: usize) -> TransitionRecord {
        let layout = self.layout.expect("non-empty buffer has a layout");
        let stride = layout.stride();
        let ring = &self.rings[task];
        assert!(index < ring.len, "slot {index} is empty");
        let mut rest = &ring.data[index * stride..(index + 1) * stride];
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let state = take(layout.state);
        let action = take(layout.action);
        let next_state = take(layout.state);
        let h_prev = LstmState {
            hidden: take(layout.hidden),
            cell: take(layout.hidden),
        };
        let h_curr = LstmState {
            hidden: take(layout.hidden),
            cell: take(layout.hidden),
        };
        let flags = take(3);
        TransitionRecord {
            state,
            action,
            reward: flags[0],
            next_state,
            h_prev,
            h_curr,
            task_id: task,
            terminal: flags[1] != 0.0,
            timeout: flags[2] != 0.0,
        }
    }

    /// Uniform indices with replacement into one task's ring.
    pub fn sample_indices<R: Rng + ?Sized>(&self, task: usize, n: usize, rng: &mut R) -> Vec<usize> {
        let len = self.rings[task].len;
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }

    /// `per_task` uniform samples from every task, grouped by ascending task id.
    pub fn sample_stratified<R: Rng + ?Sized>(&self, per_task: usize, rng: &mut R) -> Result<Vec<TransitionRecord>> {
        if let Some(t) = (0..self.rings.len()).find(|&t| self.task_len(t) == 0) {
            return Err(Error::input(format!("task {t} has no stored transitions")));
        }
        let mut out = Vec::with_capacity(per_task * self.rings.len());
        for task in 0..self.rings.len() {
            for i in self.sample_indices(task, per_task, rng) {
                out.push(self.get(task, i));
            }
        }
        Ok(out)
    }
}
