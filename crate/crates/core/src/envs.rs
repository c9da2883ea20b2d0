//! Ground-truth robot simulators and the two tasks (circle following and goal
//! reaching).
//!
//! All three robots are Euler-discretized with additive Gaussian process noise
//! `d_k ~ N(0, dt^2 diag(...))`. Actions are normalized to `[-1, 1]^2`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, is_collision, Obstacle, Point, Region};
use crate::rng::RandomStream;

pub type State = Vec<f64>;

pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Unicycle,
    Ackermann,
    DoubleIntegrator,
}

impl EnvKind {
    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::Unicycle => 3,
            EnvKind::Ackermann | EnvKind::DoubleIntegrator => 4,
        }
    }

    /// Index of the heading angle in the state, if the robot has one.
    pub fn heading_index(self) -> Option<usize> {
        match self {
            EnvKind::Unicycle | EnvKind::Ackermann => Some(2),
            EnvKind::DoubleIntegrator => None,
        }
    }

    pub fn is_first_order(self) -> bool {
        !matches!(self, EnvKind::DoubleIntegrator)
    }

    pub fn default_horizon(self) -> usize {
        match self {
            EnvKind::Ackermann => 40,
            _ => 25,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Unicycle => "unicycle",
            EnvKind::Ackermann => "ackermann",
            EnvKind::DoubleIntegrator => "double_integrator",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    pub dt: f64,
    pub v_max: f64,
    /// Unicycle turn rate limit (rad/s).
    pub omega_max: f64,
    /// Ackermann steering rate limit (rad/s).
    pub gamma_max: f64,
    /// Ackermann wheelbase (m).
    pub wheelbase: f64,
    /// Double-integrator acceleration limit per axis (m/s^2).
    pub a_max: f64,
    /// Per-state process-noise variance.
    pub noise_var: Vec<f64>,
    pub steering_clip: f64,
    pub speed_clip: f64,
    pub robot_radius: f64,
}

impl EnvParams {
    pub fn for_kind(kind: EnvKind) -> Self {
        let dt: f64 = 0.02;
        let dt2 = dt * dt;
        let stds: &[f64] = match kind {
            EnvKind::Unicycle => &[0.03, 0.03, 0.05],
            EnvKind::Ackermann => &[0.03, 0.03, 0.05, 0.01],
            EnvKind::DoubleIntegrator => &[0.03, 0.03, 0.1, 0.1],
        };
        Self {
            dt,
            v_max: 1.5,
            omega_max: PI,
            gamma_max: 2.0,
            wheelbase: 0.2,
            a_max: 3.0,
            noise_var: stds.iter().map(|s| dt2 * s * s).collect(),
            steering_clip: 0.7,
            speed_clip: 1.5,
            robot_radius: 0.1,
        }
    }

    pub fn validate(&self, kind: EnvKind) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("omega_max", self.omega_max),
            ("gamma_max", self.gamma_max),
            ("wheelbase", self.wheelbase),
            ("a_max", self.a_max),
            ("steering_clip", self.steering_clip),
            ("speed_clip", self.speed_clip),
            ("robot_radius", self.robot_radius),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("env.params.{name}"), "must be > 0"));
            }
        }
        if self.noise_var.len() != kind.state_dim() {
            return Err(Error::config(
                "env.params.noise_var",
                format!("expected {} entries", kind.state_dim()),
            ));
        }
        if self.noise_var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("env.params.noise_var", "entries must be >= 0"));
        }
        Ok(())
    }
}

#[inline]
fn clamp_action(a: f64) -> f64 {
    a.clamp(-1.0, 1.0)
}

/// Euler step of the unicycle `(x, y, theta)`.
pub fn step_unicycle(p: &EnvParams, s: &[f64], a: &[f64], d: &[f64], out: &mut [f64]) {
    let v = p.v_max * a[0];
    let w = p.omega_max * a[1];
    out[0] = s[0] + p.dt * v * s[2].cos() + d[0];
    out[1] = s[1] + p.dt * v * s[2].sin() + d[1];
    out[2] = s[2] + p.dt * w + d[2];
}

/// Euler step of the Ackermann car `(x, y, theta, psi)`; steering is clipped
/// after the update.
pub fn step_ackermann(p: &EnvParams, s: &[f64], a: &[f64], d: &[f64], out: &mut [f64]) {
    let v = p.v_max * a[0];
    out[0] = s[0] + p.dt * v * s[2].cos() + d[0];
    out[1] = s[1] + p.dt * v * s[2].sin() + d[1];
    out[2] = s[2] + p.dt * v * s[3].tan() / p.wheelbase + d[2];
    out[3] = (s[3] + p.dt * p.gamma_max * a[1] + d[3]).clamp(-p.steering_clip, p.steering_clip);
}

/// Euler step of the planar double integrator `(x, y, vx, vy)`; speed is
/// rescaled onto the limit after the update.
pub fn step_double_integrator(p: &EnvParams, s: &[f64], a: &[f64], d: &[f64], out: &mut [f64]) {
    out[0] = s[0] + p.dt * s[2] + d[0];
    out[1] = s[1] + p.dt * s[3] + d[1];
    let mut vx = s[2] + p.dt * p.a_max * a[0] + d[2];
    let mut vy = s[3] + p.dt * p.a_max * a[1] + d[3];
    let speed = (vx * vx + vy * vy).sqrt();
    if speed > p.speed_clip {
        let k = p.speed_clip / speed;
        vx *= k;
        vy *= k;
    }
    out[2] = vx;
    out[3] = vy;
}

/// One step of `kind`'s dynamics with explicit noise `d`. Actions are
/// clamped to `[-1, 1]`.
pub fn step_dynamics(kind: EnvKind, p: &EnvParams, s: &[f64], a: &[f64], d: &[f64], out: &mut [f64]) {
    let a = [clamp_action(a[0]), clamp_action(a[1])];
    match kind {
        EnvKind::Unicycle => step_unicycle(p, s, &a, d, out),
        EnvKind::Ackermann => step_ackermann(p, s, &a, d, out),
        EnvKind::DoubleIntegrator => step_double_integrator(p, s, &a, d, out),
    }
}

/// Noise-free step (the conditional mean when no clip is active).
pub fn nominal_step(kind: EnvKind, p: &EnvParams, s: &[f64], a: &[f64], out: &mut [f64]) {
    const ZERO: [f64; 4] = [0.0; 4];
    step_dynamics(kind, p, s, a, &ZERO[..kind.state_dim()], out);
}

pub fn sample_process_noise(p: &EnvParams, rng: &mut RandomStream) -> State {
    p.noise_var.iter().map(|v| v.sqrt() * rng.normal()).collect()
}

#[inline]
pub fn position(s: &[f64]) -> Point {
    [s[0], s[1]]
}

/// World-frame velocity realized at `s_next`. First-order robots carry no
/// velocity state, so the commanded speed along the new heading is used.
pub fn world_velocity(kind: EnvKind, p: &EnvParams, s_next: &[f64], a: &[f64]) -> Point {
    match kind {
        EnvKind::DoubleIntegrator => [s_next[2], s_next[3]],
        _ => {
            let v = p.v_max * clamp_action(a[0]);
            [v * s_next[2].cos(), v * s_next[2].sin()]
        }
    }
}

/// Circle-following reward: tangential (counter-clockwise) speed, discounted
/// by the radial distance from the target circle.
pub fn circle_reward_at(pos: Point, vel: Point, radius: f64) -> f64 {
    let rho = (pos[0] * pos[0] + pos[1] * pos[1]).sqrt();
    if rho < 1e-6 {
        return 0.0;
    }
    (-vel[0] * pos[1] + vel[1] * pos[0]) / ((1.0 + (rho - radius).abs()) * rho)
}

pub fn circle_reward(kind: EnvKind, p: &EnvParams, s_next: &[f64], a: &[f64], radius: f64) -> f64 {
    circle_reward_at(position(s_next), world_velocity(kind, p, s_next, a), radius)
}

pub fn goal_reward(prev_dist: f64, new_dist: f64) -> f64 {
    prev_dist - new_dist
}

/// Goal features appended to the model input: unit vector to the goal (robot
/// frame for headed robots, world frame otherwise) and `min(d / 8, 1)`.
pub fn augment_goal_features(kind: EnvKind, s: &[f64], goal: Point) -> [f64; 3] {
    let dx = goal[0] - s[0];
    let dy = goal[1] - s[1];
    let d = (dx * dx + dy * dy).sqrt();
    let (mut ux, mut uy) = if d > 0.0 { (dx / d, dy / d) } else { (0.0, 0.0) };
    if let Some(h) = kind.heading_index() {
        let (sn, cs) = s[h].sin_cos();
        let rx = cs * ux + sn * uy;
        let ry = -sn * ux + cs * uy;
        ux = rx;
        uy = ry;
    }
    [ux, uy, (d / 8.0).min(1.0)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: Point,
    pub radius: f64,
}

/// Obstacles, spawn region and goal candidates of an arena.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub name: String,
    pub spawn: Region,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub goals: Vec<GoalRegion>,
}

impl Layout {
    pub fn circle_default() -> Self {
        Self::from_toml(include_str!("../layouts/circle.toml")).expect("bundled layout")
    }

    pub fn goal_default() -> Self {
        Self::from_toml(include_str!("../layouts/goal.toml")).expect("bundled layout")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let layout: Layout = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spawn.min[0] < self.spawn.max[0] && self.spawn.min[1] < self.spawn.max[1]) {
            return Err(Error::config("layout.spawn", "min must be < max"));
        }
        if let Some(i) = self.obstacles.iter().position(|o| !o.is_valid()) {
            return Err(Error::config(format!("layout.obstacles[{i}]"), "degenerate shape"));
        }
        if self.goals.iter().any(|g| g.radius <= 0.0) {
            return Err(Error::config("layout.goals", "radius must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Circle,
    Goal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub circle_radius: f64,
    pub episode_cap: usize,
    pub layout: Layout,
}

impl TaskSpec {
    pub fn circle() -> Self {
        Self {
            task: TaskKind::Circle,
            circle_radius: 1.5,
            episode_cap: 1000,
            layout: Layout::circle_default(),
        }
    }

    pub fn goal() -> Self {
        Self {
            task: TaskKind::Goal,
            circle_radius: 1.5,
            episode_cap: 2000,
            layout: Layout::goal_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_cap < 1 {
            return Err(Error::config("task.episode_cap", "must be >= 1"));
        }
        if self.task == TaskKind::Goal && self.layout.goals.is_empty() {
            return Err(Error::config("layout.goals", "goal task needs at least one goal"));
        }
        self.layout.validate()
    }
}

/// What a model needs to know about the task to predict rewards/features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskContext {
    pub task: TaskKind,
    pub goal: Option<Point>,
    pub circle_radius: f64,
}

impl Default for TaskContext {
    fn default() -> Self {
        Self {
            task: TaskKind::Circle,
            goal: None,
            circle_radius: 1.5,
        }
    }
}

/// True one-step reward.
pub fn task_reward(kind: EnvKind, p: &EnvParams, ctx: &TaskContext, s: &[f64], a: &[f64], s_next: &[f64]) -> f64 {
    match (ctx.task, ctx.goal) {
        (TaskKind::Goal, Some(g)) => goal_reward(dist(position(s), g), dist(position(s_next), g)),
        _ => circle_reward(kind, p, s_next, a, ctx.circle_radius),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    None,
    Goal,
    Timeout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: State,
    pub reward: f64,
    pub collided: bool,
    pub done: bool,
    pub done_reason: DoneReason,
}

const SPAWN_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct Env {
    pub kind: EnvKind,
    pub params: EnvParams,
    pub task: TaskSpec,
    state: State,
    goal: Option<GoalRegion>,
    steps: usize,
}

impl Env {
    pub fn new(kind: EnvKind, params: EnvParams, task: TaskSpec) -> Self {
        Self {
            kind,
            state: vec![0.0; kind.state_dim()],
            params,
            task,
            goal: None,
            steps: 0,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn goal(&self) -> Option<&GoalRegion> {
        self.goal.as_ref()
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.task.layout.obstacles
    }

    pub fn context(&self) -> TaskContext {
        TaskContext {
            task: self.task.task,
            goal: self.goal.as_ref().map(|g| g.center),
            circle_radius: self.task.circle_radius,
        }
    }

    /// Draws a collision-free pose from the spawn region (zero velocity and
    /// steering, uniform heading) and, for the goal task, a goal.
    pub fn reset(&mut self, rng: &mut RandomStream) -> Result<(State, Option<Point>)> {
        let spawn = self.task.layout.spawn;
        let mut placed = None;
        for _ in 0..SPAWN_ATTEMPTS {
            let p = [
                rng.uniform_range(spawn.min[0], spawn.max[0]),
                rng.uniform_range(spawn.min[1], spawn.max[1]),
            ];
            if !is_collision(p, self.obstacles(), self.params.robot_radius) {
                placed = Some(p);
                break;
            }
        }
        let p = placed.ok_or(Error::SpawnFailed(SPAWN_ATTEMPTS))?;
        let mut s = vec![0.0; self.kind.state_dim()];
        s[0] = p[0];
        s[1] = p[1];
        if let Some(h) = self.kind.heading_index() {
            s[h] = rng.uniform_range(-PI, PI);
        }
        self.goal = match self.task.task {
            TaskKind::Goal => {
                let goals = &self.task.layout.goals;
                Some(goals[rng.index(goals.len())].clone())
            }
            TaskKind::Circle => None,
        };
        self.state = s.clone();
        self.steps = 0;
        Ok((s, self.goal.as_ref().map(|g| g.center)))
    }

    /// Start from a given state (tests and evaluation harnesses).
    pub fn reset_to(&mut self, state: &[f64], goal: Option<GoalRegion>) {
        self.state = state.to_vec();
        self.goal = goal;
        self.steps = 0;
    }

    pub fn step(&mut self, action: &[f64], rng: &mut RandomStream) -> StepOutcome {
        let d = sample_process_noise(&self.params, rng);
        let mut next = vec![0.0; self.kind.state_dim()];
        step_dynamics(self.kind, &self.params, &self.state, action, &d, &mut next);
        let ctx = self.context();
        let reward = task_reward(self.kind, &self.params, &ctx, &self.state, action, &next);
        let collided = is_collision(position(&next), self.obstacles(), self.params.robot_radius);
        self.steps += 1;
        let reached = self
            .goal
            .as_ref()
            .is_some_and(|g| dist(position(&next), g.center) <= g.radius);
        let done_reason = if reached {
            DoneReason::Goal
        } else if self.steps >= self.task.episode_cap {
            DoneReason::Timeout
        } else {
            DoneReason::None
        };
        self.state = next.clone();
        StepOutcome {
            next_state: next,
            reward,
            collided,
            done: done_reason != DoneReason::None,
            done_reason,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn unicycle_examples() {
        let p = EnvParams::for_kind(EnvKind::Unicycle);
        let mut out = [0.0; 3];
        step_unicycle(&p, &[0.0, 0.0, 0.0], &[1.0, 0.0], &[0.0; 3], &mut out);
        assert!(close(&out, &[0.03, 0.0, 0.0]));
        step_unicycle(&p, &[0.0, 0.0, PI / 2.0], &[1.0, 0.0], &[0.0; 3], &mut out);
        assert!(close(&out, &[0.0, 0.03, PI / 2.0]));
        let s = [0.3, -0.2, 1.1];
        step_unicycle(&p, &s, &[0.0, 0.0], &[0.0; 3], &mut out);
        assert_eq!(out, s);
    }

    #[test]
    fn ackermann_examples() {
        let p = EnvParams::for_kind(EnvKind::Ackermann);
        let mut out = [0.0; 4];
        step_ackermann(&p, &[0.0; 4], &[1.0, 0.0], &[0.0; 4], &mut out);
        assert!(close(&out, &[0.03, 0.0, 0.0, 0.0]));
        step_ackermann(&p, &[0.2, 0.1, 0.4, 0.7], &[0.0, 1.0], &[0.0; 4], &mut out);
        assert_eq!(out[3], 0.7);
        let s = [0.2, 0.1, 0.4, -0.3];
        step_ackermann(&p, &s, &[0.0, 0.0], &[0.0; 4], &mut out);
        assert_eq!(out, s);
    }

    #[test]
    fn double_integrator_examples() {
        let p = EnvParams::for_kind(EnvKind::DoubleIntegrator);
        let mut out = [0.0; 4];
        step_double_integrator(&p, &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0], &[0.0; 4], &mut out);
        assert!(close(&out, &[0.02, 0.0, 1.0, 0.0]));
        // Noise pushes velocity to (1.2, 1.2), which exceeds the limit.
        step_double_integrator(&p, &[0.0; 4], &[0.0, 0.0], &[0.0, 0.0, 1.2, 1.2], &mut out);
        let k = 1.5 / 2.88f64.sqrt();
        assert!((out[2] - 1.2 * k).abs() < 1e-12 && (out[3] - 1.2 * k).abs() < 1e-12);
        assert!((out[2] - 1.0607).abs() < 1e-4);
        step_double_integrator(&p, &[0.0, 0.0, 0.5, 0.5], &[0.0, 0.0], &[0.0; 4], &mut out);
        assert_eq!(&out[2..], &[0.5, 0.5]);
    }

    #[test]
    fn noise_covariance_matches_params() {
        let p = EnvParams::for_kind(EnvKind::Unicycle);
        let dt2 = 0.02f64.powi(2);
        let expect = [dt2 * 0.03f64.powi(2), dt2 * 0.03f64.powi(2), dt2 * 0.05f64.powi(2)];
        assert_eq!(p.noise_var, expect);
        let mut a = RandomStream::new(1, 0);
        let mut b = RandomStream::new(1, 0);
        assert_eq!(sample_process_noise(&p, &mut a), sample_process_noise(&p, &mut b));
    }

    #[test]
    fn noise_sample_variance() {
        for kind in [EnvKind::Unicycle, EnvKind::Ackermann, EnvKind::DoubleIntegrator] {
            let p = EnvParams::for_kind(kind);
            let mut rng = RandomStream::new(2, kind as u64);
            let n = 100_000;
            let mut sum2 = vec![0.0; kind.state_dim()];
            for _ in 0..n {
                for (acc, d) in sum2.iter_mut().zip(sample_process_noise(&p, &mut rng)) {
                    *acc += d * d;
                }
            }
            for (s, v) in sum2.iter().zip(&p.noise_var) {
                let est = s / n as f64;
                assert!((est / v - 1.0).abs() < 0.05, "{kind:?}: {est} vs {v}");
            }
        }
    }

    #[test]
    fn circle_reward_examples() {
        assert!((circle_reward_at([1.5, 0.0], [0.0, 1.5], 1.5) - 1.5).abs() < 1e-12);
        assert!((circle_reward_at([1.5, 0.0], [0.0, -1.5], 1.5) + 1.5).abs() < 1e-12);
        assert_eq!(circle_reward_at([0.7, 0.2], [0.0, 0.0], 1.5), 0.0);
        assert_eq!(circle_reward_at([0.0, 0.0], [1.0, 0.0], 1.5), 0.0);
    }

    #[test]
    fn goal_reward_examples() {
        assert!((goal_reward(2.0, 1.9) - 0.1).abs() < 1e-12);
        assert_eq!(goal_reward(1.3, 1.3), 0.0);
        assert!((goal_reward(1.0, 1.2) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn goal_feature_examples() {
        let f = augment_goal_features(EnvKind::Unicycle, &[0.0, 0.0, 0.0], [4.0, 0.0]);
        assert!(close(&f, &[1.0, 0.0, 0.5]));
        let f = augment_goal_features(EnvKind::Unicycle, &[0.0, 0.0, PI], [4.0, 0.0]);
        assert!(close(&f, &[-1.0, 0.0, 0.5]));
        let f = augment_goal_features(EnvKind::DoubleIntegrator, &[0.0, 0.0, 1.0, 0.0], [0.0, 10.0]);
        assert!(close(&f, &[0.0, 1.0, 1.0]));
        let f = augment_goal_features(EnvKind::Unicycle, &[1.0, 1.0, 0.3], [1.0, 1.0]);
        assert_eq!(f, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn goal_episode_terminates_on_arrival() {
        let kind = EnvKind::Unicycle;
        let mut params = EnvParams::for_kind(kind);
        params.noise_var = vec![0.0; 3];
        let mut env = Env::new(kind, params, TaskSpec::goal());
        let goal = GoalRegion {
            center: [0.5, 0.0],
            radius: 0.25,
        };
        env.reset_to(&[0.0, 0.0, 0.0], Some(goal));
        let mut rng = RandomStream::new(0, 0);
        let mut total = 0.0;
        let mut last = None;
        for _ in 0..20 {
            let o = env.step(&[1.0, 0.0], &mut rng);
            total += o.reward;
            if o.done {
                last = Some(o);
                break;
            }
        }
        let o = last.expect("goal reached");
        assert_eq!(o.done_reason, DoneReason::Goal);
        assert!(dist(position(&o.next_state), [0.5, 0.0]) <= 0.25);
        // Rewards telescope.
        assert!((total - (0.5 - dist(position(&o.next_state), [0.5, 0.0]))).abs() < 1e-12);
    }

    #[test]
    fn circle_episode_times_out() {
        let kind = EnvKind::Unicycle;
        let mut env = Env::new(kind, EnvParams::for_kind(kind), TaskSpec::circle());
        let mut rng = RandomStream::new(4, 0);
        env.reset(&mut rng).unwrap();
        for k in 1..=1000 {
            let o = env.step(&[0.0, 0.0], &mut rng);
            if k < 1000 {
                assert!(!o.done);
            } else {
                assert_eq!(o.done_reason, DoneReason::Timeout);
            }
        }
    }

    #[test]
    fn collisions_do_not_terminate() {
        let kind = EnvKind::Unicycle;
        let mut params = EnvParams::for_kind(kind);
        params.noise_var = vec![0.0; 3];
        let mut env = Env::new(kind, params, TaskSpec::circle());
        env.reset_to(&[1.14, 0.0, 0.0], None);
        let mut rng = RandomStream::new(0, 0);
        let o = env.step(&[1.0, 0.0], &mut rng);
        assert!(o.collided);
        assert!(!o.done);
    }

    #[test]
    fn reset_is_collision_free_and_deterministic() {
        let kind = EnvKind::Unicycle;
        let mut env = Env::new(kind, EnvParams::for_kind(kind), TaskSpec::goal());
        let mut a = RandomStream::new(9, 1);
        let mut b = RandomStream::new(9, 1);
        for _ in 0..50 {
            let (s, g) = env.reset(&mut a).unwrap();
            let mut env2 = env.clone();
            assert_eq!(env2.reset(&mut b).unwrap(), (s.clone(), g));
            assert!(!is_collision(position(&s), env.obstacles(), 0.1));
            assert!(g.is_some());
            assert!((-PI..PI).contains(&s[2]));
        }
    }

    #[test]
    fn reset_fails_on_blocked_spawn() {
        let kind = EnvKind::Unicycle;
        let mut task = TaskSpec::circle();
        task.layout.obstacles.push(Obstacle::Rect {
            min: [-1.0, -1.0],
            max: [1.0, 1.0],
        });
        let mut env = Env::new(kind, EnvParams::for_kind(kind), task);
        assert!(matches!(
            env.reset(&mut RandomStream::new(0, 0)),
            Err(Error::SpawnFailed(_))
        ));
    }

    #[test]
    fn bundled_layouts_parse() {
        let c = Layout::circle_default();
        assert_eq!(c.obstacles.len(), 2);
        let g = Layout::goal_default();
        assert_eq!(g.goals.len(), 6);
        for goal in &g.goals {
            assert!(!is_collision(goal.center, &g.obstacles, goal.radius + 0.1));
        }
    }
}
