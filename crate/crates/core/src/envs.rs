//! A small planar multi-task control suite.
//!
//! A point-mass agent moves in the box `[-1, 1]^2` under force actions. Reach
//! tasks ask the agent to get to a goal; push and pick-lite tasks ask it to
//! first make contact with an object and then bring the object to the goal.
//! Success is binary and latches for the rest of the episode.
//!
//! Every task shares one observation layout:
//! `[agent_x, agent_y, vel_x, vel_y, object_x, object_y, goal_x, goal_y]`
//! with the object slot zeroed for single-phase tasks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBS_DIM: usize = 8;
pub const ACTION_DIM: usize = 2;
pub const ARENA: f64 = 1.0;
pub const ARENA_DIAMETER: f64 = 2.0 * std::f64::consts::SQRT_2 * ARENA;
pub const CONTACT_RADIUS: f64 = 0.08;
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const VELOCITY_DECAY: f64 = 0.9;
pub const FORCE_GAIN: f64 = 0.1;
pub const DT: f64 = 0.05;
/// Pick-lite only grasps when the agent is slower than this.
pub const GRASP_SPEED: f64 = 0.5;
/// Reward is `-REWARD_SCALE * remaining_distance / phase_count`.
pub const REWARD_SCALE: f64 = 0.5;
pub const DEFAULT_HORIZON: usize = 150;
pub const MIXED_VARIANTS: usize = 50;
/// Base seed for generating variant positions; task `k` uses `base + k`.
pub const POSITION_SEED: u64 = 0x00C0_FFEE;
/// The reach-wall obstacle: the segment `x = 0`, `|y| <= WALL_HALF_HEIGHT`.
pub const WALL_HALF_HEIGHT: f64 = 0.4;

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Reach,
    Push,
    PickLite,
    ReachWall,
    PushBack,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::Push => "push",
            TaskKind::PickLite => "pick-lite",
            TaskKind::ReachWall => "reach-wall",
            TaskKind::PushBack => "push-back",
        }
    }

    pub fn phase_count(self) -> usize {
        match self {
            TaskKind::Reach | TaskKind::ReachWall => 1,
            TaskKind::Push | TaskKind::PickLite | TaskKind::PushBack => 2,
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            TaskKind::Reach => 0,
            TaskKind::Push => 1,
            TaskKind::PickLite => 2,
            TaskKind::ReachWall => 3,
            TaskKind::PushBack => 4,
        }
    }

    fn agent_start(self) -> Vec2 {
        match self {
            TaskKind::Reach | TaskKind::Push | TaskKind::PickLite => [0.0, -0.6],
            TaskKind::ReachWall => [-0.6, 0.0],
            TaskKind::PushBack => [-0.2, 0.0],
        }
    }

    /// Draws one (object_start, goal) pair.
    fn sample_positions<R: Rng>(self, rng: &mut R) -> VariantPositions {
        let start = self.agent_start();
        let far = |a: Vec2, b: Vec2, d: f64| dist(a, b) >= d;
        loop {
            let (object_start, goal) = match self {
                TaskKind::Reach => ([0.0, 0.0], [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)]),
                TaskKind::Push | TaskKind::PickLite => (
                    [rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4)],
                    [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)],
                ),
                TaskKind::ReachWall => ([0.0, 0.0], [rng.random_range(0.3..0.8), rng.random_range(-0.3..0.3)]),
                TaskKind::PushBack => (
                    [rng.random_range(0.1..0.4), rng.random_range(-0.3..0.3)],
                    [rng.random_range(-0.8..-0.5), rng.random_range(-0.5..0.5)],
                ),
            };
            let ok = match self.phase_count() {
                1 => far(start, goal, 0.3),
                _ => far(start, object_start, 0.2) && far(object_start, goal, 0.3),
            };
            if ok {
                return VariantPositions { object_start, goal };
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantPositions {
    pub object_start: Vec2,
    pub goal: Vec2,
}

/// One task of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub phase_count: usize,
    pub success_radius: f64,
    pub agent_start: Vec2,
    pub variant_positions: Vec<VariantPositions>,
}

impl TaskSpec {
    fn build(kind: TaskKind, variants: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(POSITION_SEED + kind.seed_offset());
        let variant_positions = (0..variants).map(|_| kind.sample_positions(&mut rng)).collect();
        Self {
            name: kind.name().to_string(),
            kind,
            state_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            phase_count: kind.phase_count(),
            success_radius: SUCCESS_RADIUS,
            agent_start: kind.agent_start(),
            variant_positions,
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.variant_positions.len() == 1
    }
}

/// Known suites. Fixed suites use position set 0 of each task; mixed suites
/// use all fifty.
pub const SUITES: [&str; 6] = [
    "MT3-Fixed",
    "MT3-Mixed",
    "MT5-Fixed",
    "MT5-Mixed",
    "Reach-Fixed",
    "Reach-Mixed",
];

pub fn register_suite(name: &str) -> Result<Vec<TaskSpec>> {
    let mt3 = [TaskKind::Reach, TaskKind::Push, TaskKind::PickLite];
    let mt5 = [
        TaskKind::Reach,
        TaskKind::Push,
        TaskKind::PickLite,
        TaskKind::ReachWall,
        TaskKind::PushBack,
    ];
    let (kinds, variants): (&[TaskKind], usize) = match name {
        "MT3-Fixed" => (&mt3, 1),
        "MT3-Mixed" => (&mt3, MIXED_VARIANTS),
        "MT5-Fixed" => (&mt5, 1),
        "MT5-Mixed" => (&mt5, MIXED_VARIANTS),
        "Reach-Fixed" => (&mt3[..1], 1),
        "Reach-Mixed" => (&mt3[..1], MIXED_VARIANTS),
        other => {
            return Err(Error::input(format!(
                "unknown suite `{other}` (expected one of {})",
                SUITES.join(", ")
            )))
        }
    };
    Ok(kinds
        .iter()
        .map(|&k| TaskSpec::build(k, variants))
        .collect())
}

/// Structured-text manifest of a suite for reproducibility audits.
pub fn suite_manifest(name: &str) -> Result<String> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        suite: &'a str,
        position_seed: u64,
        contact_radius: f64,
        reward_scale: f64,
        tasks: Vec<TaskSpec>,
    }
    let tasks = register_suite(name)?;
    let m = Manifest {
        suite: name,
        position_seed: POSITION_SEED,
        contact_radius: CONTACT_RADIUS,
        reward_scale: REWARD_SCALE,
        tasks,
    };
    toml::to_string(&m).map_err(|e| Error::input(format!("cannot serialize manifest: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_pos: Vec2,
    pub agent_vel: Vec2,
    pub object_pos: Vec2,
    pub goal_pos: Vec2,
    pub step_count: usize,
    /// 1 until contact is first made, then 2. Single-phase tasks stay at 1.
    pub phase: usize,
    pub attached: bool,
    pub success: bool,
    pub done: bool,
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.agent_pos[0],
            self.agent_pos[1],
            self.agent_vel[0],
            self.agent_vel[1],
            self.object_pos[0],
            self.object_pos[1],
            self.goal_pos[0],
            self.goal_pos[1],
        ]
    }
}

/// Which position set a reset uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantChoice {
    Index(usize),
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// The episode ended by hitting the horizon rather than by success.
    pub timeout: bool,
}

/// One environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Env {
    pub spec: TaskSpec,
    pub horizon: usize,
    pub state: EnvState,
}

impl Env {
    pub fn new(spec: TaskSpec, horizon: usize) -> Self {
        let state = initial_state(&spec, 0);
        Self { spec, horizon, state }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, choice: VariantChoice, rng: &mut R) -> Result<Vec<f64>> {
        let n = self.spec.variant_positions.len();
        let index = match choice {
            VariantChoice::Index(i) if i < n => i,
            VariantChoice::Index(i) => {
                return Err(Error::input(format!("variant index {i} out of range (task has {n})")))
            }
            VariantChoice::Random if n == 1 => 0,
            VariantChoice::Random => rng.random_range(0..n),
        };
        self.state = initial_state(&self.spec, index);
        Ok(self.state.observation())
    }

    pub fn observation(&self) -> Vec<f64> {
        self.state.observation()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != ACTION_DIM {
            return Err(Error::input(format!("action must have {ACTION_DIM} entries")));
        }
        if action.iter().any(|a| a.is_nan()) {
            return Err(Error::input("action contains NaN"));
        }
        if self.state.done {
            return Err(Error::input("step called on a finished episode"));
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let kind = self.spec.kind;
        let s = &mut self.state;

        let speed_before = norm(s.agent_vel);
        let in_contact_before = kind.phase_count() == 2 && dist(s.agent_pos, s.object_pos) < CONTACT_RADIUS;
        for (v, f) in s.agent_vel.iter_mut().zip(a) {
            *v = VELOCITY_DECAY * *v + FORCE_GAIN * f;
        }
        let prev = s.agent_pos;
        let mut next = [
            (prev[0] + DT * s.agent_vel[0]).clamp(-ARENA, ARENA),
            (prev[1] + DT * s.agent_vel[1]).clamp(-ARENA, ARENA),
        ];
        if kind == TaskKind::ReachWall && crosses_wall(prev, next) {
            next[0] = prev[0];
            s.agent_vel[0] = 0.0;
        }
        s.agent_pos = next;

        if kind.phase_count() == 2 {
            let grasp = match kind {
                TaskKind::PickLite => in_contact_before && speed_before < GRASP_SPEED,
                _ => in_contact_before,
            };
            if grasp {
                s.attached = true;
                s.phase = 2;
            }
            if s.attached {
                let delta = [next[0] - prev[0], next[1] - prev[1]];
                s.object_pos = [
                    (s.object_pos[0] + delta[0]).clamp(-ARENA, ARENA),
                    (s.object_pos[1] + delta[1]).clamp(-ARENA, ARENA),
                ];
            }
        }
        s.step_count += 1;

        let reached = match kind.phase_count() {
            1 => dist(s.agent_pos, s.goal_pos) < self.spec.success_radius,
            _ => s.phase == 2 && dist(s.object_pos, s.goal_pos) < self.spec.success_radius,
        };
        s.success = s.success || reached;
        let timeout = !s.success && s.step_count >= self.horizon;
        s.done = s.success || s.step_count >= self.horizon;
        Ok(StepOutcome {
            observation: s.observation(),
            reward: reward(kind, s),
            done: s.done,
            success: s.success,
            timeout,
        })
    }
}

fn initial_state(spec: &TaskSpec, index: usize) -> EnvState {
    let v = spec.variant_positions[index];
    let object_pos = if spec.phase_count == 2 { v.object_start } else { [0.0, 0.0] };
    EnvState {
        agent_pos: spec.agent_start,
        agent_vel: [0.0, 0.0],
        object_pos,
        goal_pos: v.goal,
        step_count: 0,
        phase: 1,
        attached: false,
        success: false,
        done: false,
    }
}

/// Dense shaping: negative remaining path length to the final target,
/// divided by the number of phases so every task shares the bound
/// `ARENA_DIAMETER * REWARD_SCALE` and the reward is continuous at contact.
pub fn reward(kind: TaskKind, s: &EnvState) -> f64 {
    let remaining = match (kind.phase_count(), s.phase) {
        (1, _) => dist(s.agent_pos, s.goal_pos),
        (_, 1) => dist(s.agent_pos, s.object_pos) + dist(s.object_pos, s.goal_pos),
        _ => dist(s.object_pos, s.goal_pos),
    };
    -REWARD_SCALE * remaining / kind.phase_count() as f64
}

fn crosses_wall(prev: Vec2, next: Vec2) -> bool {
    if (prev[0] < 0.0) == (next[0] < 0.0) {
        return false;
    }
    let t = prev[0] / (prev[0] - next[0]);
    let y = prev[1] + t * (next[1] - prev[1]);
    y.abs() <= WALL_HALF_HEIGHT
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn norm(v: Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Hand-written controller that solves every task: a damped steering law
/// toward the current phase target. Serves as the solvability oracle.
pub fn scripted_action(spec: &TaskSpec, s: &EnvState) -> Vec2 {
    let target = match (spec.phase_count, s.phase) {
        (1, _) => {
            if spec.kind == TaskKind::ReachWall && s.agent_pos[0] < 0.0 && s.goal_pos[0] > 0.0 {
                // go around the wall's top end first
                if s.agent_pos[1] < WALL_HALF_HEIGHT + 0.1 {
                    [-0.15, WALL_HALF_HEIGHT + 0.2]
                } else {
                    [0.15, WALL_HALF_HEIGHT + 0.2]
                }
            } else {
                s.goal_pos
            }
        }
        (_, 1) => s.object_pos,
        _ => {
            let offset = [s.agent_pos[0] - s.object_pos[0], s.agent_pos[1] - s.object_pos[1]];
            [s.goal_pos[0] + offset[0], s.goal_pos[1] + offset[1]]
        }
    };
    let kp = 18.0;
    let kd = 5.0;
    [
        (kp * (target[0] - s.agent_pos[0]) - kd * s.agent_vel[0]).clamp(-1.0, 1.0),
        (kp * (target[1] - s.agent_pos[1]) - kd * s.agent_vel[1]).clamp(-1.0, 1.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_scripted(spec: &TaskSpec, variant: usize, horizon: usize) -> (bool, usize) {
        let mut env = Env::new(spec.clone(), horizon);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(VariantChoice::Index(variant), &mut rng).unwrap();
        loop {
            let a = scripted_action(&env.spec, &env.state);
            let out = env.step(&a).unwrap();
            if out.done {
                return (out.success, env.state.step_count);
            }
        }
    }

    #[test]
    fn suite_sizes() {
        for (name, tasks, variants) in [
            ("MT3-Fixed", 3, 1),
            ("MT3-Mixed", 3, 50),
            ("MT5-Fixed", 5, 1),
            ("MT5-Mixed", 5, 50),
        ] {
            let suite = register_suite(name).unwrap();
            assert_eq!(suite.len(), tasks, "{name}");
            assert!(suite.iter().all(|t| t.variant_positions.len() == variants));
        }
        let mt5: Vec<_> = register_suite("MT5-Fixed").unwrap().into_iter().map(|t| t.name).collect();
        assert_eq!(mt5, ["reach", "push", "pick-lite", "reach-wall", "push-back"]);
    }

    #[test]
    fn suite_generation_is_reproducible() {
        assert_eq!(register_suite("MT5-Mixed").unwrap(), register_suite("MT5-Mixed").unwrap());
        let fixed = register_suite("MT3-Fixed").unwrap();
        let mixed = register_suite("MT3-Mixed").unwrap();
        for (f, m) in fixed.iter().zip(&mixed) {
            assert_eq!(f.variant_positions[0], m.variant_positions[0]);
        }
    }

    #[test]
    fn unknown_suite_is_input_error() {
        assert!(matches!(register_suite("MT10-Fixed"), Err(Error::Input(_))));
    }

    #[test]
    fn positions_stay_in_arena() {
        for t in register_suite("MT5-Mixed").unwrap() {
            for v in &t.variant_positions {
                for p in [v.object_start, v.goal] {
                    assert!(p.iter().all(|c| c.abs() <= ARENA));
                }
            }
        }
    }

    #[test]
    fn fixed_reset_is_identical_and_reach_pads_object_slot() {
        let spec = register_suite("MT3-Fixed").unwrap().remove(0);
        let mut env = Env::new(spec, 150);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = env.reset(VariantChoice::Random, &mut rng).unwrap();
        let b = env.reset(VariantChoice::Random, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), OBS_DIM);
        assert_eq!(&a[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn bad_variant_index_is_rejected() {
        let spec = register_suite("MT3-Fixed").unwrap().remove(0);
        let mut env = Env::new(spec, 150);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(env.reset(VariantChoice::Index(1), &mut rng), Err(Error::Input(_))));
    }

    #[test]
    fn mixed_resets_cover_variants() {
        let spec = register_suite("MT3-Mixed").unwrap().remove(1);
        let mut env = Env::new(spec, 150);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let obs = env.reset(VariantChoice::Random, &mut rng).unwrap();
            seen.insert(obs.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert!(seen.len() >= 45, "only {} variants", seen.len());
    }

    #[test]
    fn zero_action_at_rest_is_a_fixed_point() {
        let spec = register_suite("MT3-Fixed").unwrap().remove(1);
        let mut env = Env::new(spec, 150);
        let before = env.state.clone();
        let out = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(env.state.agent_pos, before.agent_pos);
        assert_eq!(env.state.object_pos, before.object_pos);
        assert!(!out.success);
    }

    #[test]
    fn agent_at_goal_succeeds_immediately() {
        let spec = register_suite("MT3-Fixed").unwrap().remove(0);
        let mut env = Env::new(spec, 150);
        env.state.agent_pos = env.state.goal_pos;
        let out = env.step(&[0.0, 0.0]).unwrap();
        assert!(out.success && out.done && !out.timeout);
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn nan_action_is_rejected() {
        let spec = register_suite("MT3-Fixed").unwrap().remove(0);
        let mut env = Env::new(spec, 150);
        assert!(matches!(env.step(&[f64::NAN, 0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn scripted_controller_solves_fixed_reach_quickly() {
        let spec = register_suite("MT3-Fixed").unwrap().remove(0);
        let (ok, steps) = run_scripted(&spec, 0, 150);
        assert!(ok && steps <= 60, "success={ok} steps={steps}");
    }

    #[test]
    fn scripted_controller_solves_every_mixed_variant() {
        for spec in register_suite("MT5-Mixed").unwrap() {
            for v in 0..spec.variant_positions.len() {
                let (ok, steps) = run_scripted(&spec, v, 150);
                assert!(ok, "{} variant {v} failed after {steps}", spec.name);
            }
        }
    }

    #[test]
    fn timeout_is_reported_separately_from_success() {
        let spec = register_suite("MT3-Fixed").unwrap().remove(1);
        let mut env = Env::new(spec, 5);
        let mut last = None;
        for _ in 0..5 {
            last = Some(env.step(&[0.0, 0.0]).unwrap());
        }
        let out = last.unwrap();
        assert!(out.done && out.timeout && !out.success);
    }

    #[test]
    fn phase_switches_on_first_contact() {
        let spec = register_suite("MT3-Fixed").unwrap().remove(1);
        let mut env = Env::new(spec, 150);
        let o = env.state.object_pos;
        env.state.agent_pos = [o[0] + 0.1, o[1]];
        env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(env.state.phase, 1);
        env.state.agent_pos = [o[0] + 0.05, o[1]];
        env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(env.state.phase, 2);
        assert!(env.state.attached);
    }

    #[test]
    fn wall_blocks_direct_path() {
        let spec = register_suite("MT5-Fixed").unwrap().remove(3);
        let mut env = Env::new(spec, 150);
        env.state.agent_pos = [-0.01, 0.0];
        env.state.agent_vel = [1.0, 0.0];
        env.step(&[1.0, 0.0]).unwrap();
        assert!(env.state.agent_pos[0] < 0.0);
        assert_eq!(env.state.agent_vel[0], 0.0);
    }

    #[test]
    fn manifest_lists_all_tasks() {
        let m = suite_manifest("MT5-Fixed").unwrap();
        for name in ["reach", "push", "pick-lite", "reach-wall", "push-back"] {
            assert!(m.contains(&format!("name = \"{name}\"")), "{m}");
        }
    }
}
