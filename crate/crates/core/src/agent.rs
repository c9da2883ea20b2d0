//! Online learning loop: receding-horizon execution, sensing, buffer
//! ingestion, retraining, evaluation, the penalty baseline and the oracle
//! ablation.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{
    nominal_step, task_reward, DoneReason, Env, EnvKind, EnvParams, Layout, State, TaskContext, TaskKind, TaskSpec, ACTION_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{min_signed_distance, Obstacle, Point};
use crate::learning::{ingest_step, train_cbf, train_classifier, train_ensemble, LearningConfig, SafetyBuffers, Transition, TransitionBuffer};
use crate::model::{Barrier, DynamicsModel, ModelPrediction, SafetyPredictor};
use crate::neural::{LipschitzCbf, PnnEnsemble, SafetyClassifier};
use crate::planner::{plan, plan_penalty, PlanMode, PlanResult, PlannerConfig};
use crate::rng::RandomStream;
use crate::sensor::{sense, SensorConfig};

const STREAM_TRAIN: u64 = 0;
const STREAM_EVAL: u64 = 1;
const TAG_INIT: u64 = 0;
const TAG_EPISODE: u64 = 1;
const TAG_RETRAIN: u64 = 2;

const EP_RESET: u64 = 0;
const EP_NOISE: u64 = 1;
const EP_LABELS: u64 = 2;
const EP_EXPLORE: u64 = 3;
const EP_PLAN: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Pects,
    PetsSc,
    OraclePects,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Pects => "pects",
            AgentKind::PetsSc => "pets_sc",
            AgentKind::OraclePects => "oracle_pects",
        }
    }
}

/// Handcrafted barrier parameters for the oracle ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Slope `c`; at most 1 so the certificate `L_h = 1` holds.
    pub gain: f64,
    /// Clearance beyond the robot radius at which `h` crosses zero.
    pub margin: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { gain: 1.0, margin: 0.05 }
    }
}

fn d_episodes() -> usize {
    500
}
fn d_exploration() -> usize {
    3
}
fn d_eval() -> usize {
    200
}
fn d_radius() -> f64 {
    1.5
}
fn d_agent() -> AgentKind {
    AgentKind::Pects
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub task: TaskKind,
    #[serde(default = "d_agent")]
    pub agent: AgentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_episodes")]
    pub episodes: usize,
    /// Leading training episodes driven by uniform random actions.
    #[serde(default = "d_exploration")]
    pub exploration_episodes: usize,
    #[serde(default = "d_eval")]
    pub eval_episodes: usize,
    /// Evaluation episode length; the task default when absent.
    #[serde(default)]
    pub episode_cap: Option<usize>,
    /// Training episode length; `episode_cap` when absent.
    #[serde(default)]
    pub train_episode_cap: Option<usize>,
    #[serde(default = "d_radius")]
    pub circle_radius: f64,
    /// Inline arena; the task's built-in layout when absent.
    #[serde(default)]
    pub layout: Option<Layout>,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub learning: LearningConfig,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

impl ExperimentConfig {
    pub fn new(env: EnvKind, task: TaskKind) -> Self {
        Self {
            env,
            task,
            agent: d_agent(),
            seed: 0,
            episodes: d_episodes(),
            exploration_episodes: d_exploration(),
            eval_episodes: d_eval(),
            episode_cap: None,
            train_episode_cap: None,
            circle_radius: d_radius(),
            layout: None,
            planner: PlannerConfig::default(),
            learning: LearningConfig::default(),
            sensor: SensorConfig::default(),
            oracle: OracleConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task_spec(&self) -> TaskSpec {
        let mut spec = match self.task {
            TaskKind::Circle => TaskSpec::circle(),
            TaskKind::Goal => TaskSpec::goal(),
        };
        spec.circle_radius = self.circle_radius;
        if let Some(cap) = self.episode_cap {
            spec.episode_cap = cap;
        }
        if let Some(l) = &self.layout {
            spec.layout = l.clone();
        }
        spec
    }

    pub fn train_task_spec(&self) -> TaskSpec {
        let mut spec = self.task_spec();
        if let Some(cap) = self.train_episode_cap {
            spec.episode_cap = cap;
        }
        spec
    }

    pub fn env_params(&self) -> EnvParams {
        EnvParams::for_kind(self.env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes < 1 {
            return Err(Error::config("episodes", "must be >= 1"));
        }
        if self.episode_cap == Some(0) || self.train_episode_cap == Some(0) {
            return Err(Error::config("episode_cap", "must be >= 1"));
        }
        if !(self.circle_radius > 0.0 && self.circle_radius.is_finite()) {
            return Err(Error::config("circle_radius", "must be > 0"));
        }
        if !(self.oracle.gain > 0.0 && self.oracle.gain <= 1.0) {
            return Err(Error::config("oracle.gain", "must be in (0, 1]"));
        }
        if !(self.oracle.margin >= 0.0 && self.oracle.margin.is_finite()) {
            return Err(Error::config("oracle.margin", "must be >= 0"));
        }
        if !(self.sensor.grid_spacing > 0.0) {
            return Err(Error::config("sensor.grid_spacing", "must be > 0"));
        }
        if let Some(l) = &self.layout {
            l.validate()?;
        }
        if self.task == TaskKind::Goal && self.task_spec().layout.goals.is_empty() {
            return Err(Error::config("layout.goals", "goal task needs at least one goal"));
        }
        self.planner.validate()?;
        self.learning.validate()
    }

    fn context_template(&self) -> TaskContext {
        TaskContext {
            task: self.task,
            goal: None,
            circle_radius: self.circle_radius,
        }
    }
}

/// True one-step mean and noise covariance of the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleModel {
    pub kind: EnvKind,
    pub params: EnvParams,
}

impl DynamicsModel for OracleModel {
    fn kind(&self) -> EnvKind {
        self.kind
    }

    fn ensemble_size(&self) -> usize {
        1
    }

    fn predict(&self, _member: usize, states: ArrayView2<f64>, actions: ArrayView2<f64>, ctx: &TaskContext) -> ModelPrediction {
        let n = self.kind.state_dim();
        let rows = states.nrows();
        let mut next = Array2::zeros((rows, n));
        let mut reward = Array1::zeros(rows);
        let mut out = [0.0; 4];
        let (mut sb, mut ab) = ([0.0; 4], [0.0; ACTION_DIM]);
        for (k, (s, a)) in states.rows().into_iter().zip(actions.rows()).enumerate() {
            for (d, v) in s.iter().enumerate() {
                sb[d] = *v;
            }
            for (d, v) in a.iter().enumerate() {
                ab[d] = *v;
            }
            let (sv, out) = (&sb[..n], &mut out[..n]);
            nominal_step(self.kind, &self.params, sv, &ab, out);
            reward[k] = task_reward(self.kind, &self.params, ctx, sv, &ab, out);
            for (d, v) in out.iter().enumerate() {
                next[[k, d]] = *v;
            }
        }
        let var = Array1::from(self.params.noise_var.clone());
        ModelPrediction {
            next_var: Array2::from_shape_fn((rows, n), |(_, j)| var[j]),
            next_mean: next,
            reward_mean: reward,
            reward_var: Array1::zeros(rows),
        }
    }
}

/// `tanh(c (d(p) - r - margin))` with `d` the signed distance to the nearest
/// obstacle. Slope in the state is at most `c <= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct HandcraftedCbf {
    pub obstacles: Vec<Obstacle>,
    pub robot_radius: f64,
    pub gain: f64,
    pub margin: f64,
}

impl HandcraftedCbf {
    pub fn at(&self, p: Point) -> f64 {
        (self.gain * (min_signed_distance(&self.obstacles, p) - self.robot_radius - self.margin)).tanh()
    }
}

impl Barrier for HandcraftedCbf {
    fn lipschitz(&self) -> f64 {
        1.0
    }

    fn values(&self, states: ArrayView2<f64>) -> Array1<f64> {
        states.rows().into_iter().map(|r| self.at([r[0], r[1]])).collect()
    }
}

pub fn oracle_components(kind: EnvKind, params: &EnvParams, layout: &Layout, cfg: &OracleConfig) -> (OracleModel, HandcraftedCbf) {
    (
        OracleModel {
            kind,
            params: params.clone(),
        },
        HandcraftedCbf {
            obstacles: layout.obstacles.clone(),
            robot_radius: params.robot_radius,
            gain: cfg.gain,
            margin: cfg.margin,
        },
    )
}

/// Two-stage MPPI with the classifier penalty and no hard constraint.
pub fn pets_sc_plan(
    s0: &[f64],
    ens: &dyn DynamicsModel,
    classifier: &dyn SafetyPredictor,
    ctx: &TaskContext,
    cfg: &PlannerConfig,
    prev: Option<ArrayView2<f64>>,
    rng: &RandomStream,
) -> Result<PlanResult> {
    plan_penalty(s0, ens, classifier, ctx, cfg, prev, rng)
}

/// How actions are chosen during an episode.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    Random,
    Constrained {
        model: &'a dyn DynamicsModel,
        barrier: &'a dyn Barrier,
    },
    Penalty {
        model: &'a dyn DynamicsModel,
        predictor: &'a dyn SafetyPredictor,
    },
}

/// Data sinks for online learning.
pub struct Ingest<'a> {
    pub sensor: &'a SensorConfig,
    pub transitions: &'a mut TransitionBuffer,
    pub buffers: &'a mut SafetyBuffers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub state: State,
    pub action: Vec<f64>,
    pub reward: f64,
    pub collided: bool,
    pub mode: PlanMode,
    pub restarts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    pub reward: f64,
    pub success: bool,
    /// No step collided.
    pub safe: bool,
    pub goal: Option<Point>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn recovery_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.mode == PlanMode::Recovery).count()
    }

    pub fn restarts(&self) -> usize {
        self.steps.iter().map(|s| s.restarts).sum()
    }
}

/// Runs one episode from a fresh reset. Circle episodes count as successful
/// when they reach the cap without a collision.
pub fn run_episode(
    policy: Policy,
    env: &mut Env,
    planner: &PlannerConfig,
    mut ingest: Option<Ingest>,
    rng: &RandomStream,
) -> Result<EpisodeRecord> {
    let mut reset_rng = rng.derive(EP_RESET);
    let mut noise_rng = rng.derive(EP_NOISE);
    let mut label_rng = rng.derive(EP_LABELS);
    let mut explore_rng = rng.derive(EP_EXPLORE);
    let (mut s, goal) = env.reset(&mut reset_rng)?;
    let ctx = env.context();
    let mut prev: Option<Array2<f64>> = None;
    let mut steps = Vec::new();
    let mut total = 0.0;
    let reached;
    loop {
        let labels = ingest
            .as_ref()
            .map(|ing| sense(&s, env.kind, &env.params, env.obstacles(), ing.sensor));
        let plan_rng = rng.derive_path(&[EP_PLAN, steps.len() as u64]);
        let planned = match policy {
            Policy::Random => None,
            Policy::Constrained { model, barrier } => Some(plan(&s, model, barrier, &ctx, planner, prev.as_ref().map(|p| p.view()), &plan_rng)?),
            Policy::Penalty { model, predictor } => {
                Some(pets_sc_plan(&s, model, predictor, &ctx, planner, prev.as_ref().map(|p| p.view()), &plan_rng)?)
            }
        };
        let (action, mode, restarts) = match planned {
            None => ((0..ACTION_DIM).map(|_| explore_rng.uniform_range(-1.0, 1.0)).collect::<Vec<_>>(), PlanMode::Nominal, 0),
            Some(r) => {
                let out = (r.applied_action.clone(), r.mode, r.diagnostics.restarts);
                prev = Some(r.action_sequence);
                out
            }
        };
        debug_assert!(action.iter().all(|a| (-1.0..=1.0).contains(a)));
        let out = env.step(&action, &mut noise_rng);
        if let (Some(ing), Some(labels)) = (ingest.as_mut(), labels) {
            let t = Transition {
                state: s.clone(),
                action: action.clone(),
                next_state: out.next_state.clone(),
                reward: out.reward,
                goal,
            };
            ingest_step(ing.buffers, ing.transitions, t, &labels, &mut label_rng)?;
        }
        total += out.reward;
        steps.push(StepRecord {
            state: s,
            action,
            reward: out.reward,
            collided: out.collided,
            mode,
            restarts,
        });
        s = out.next_state;
        if out.done {
            reached = out.done_reason == DoneReason::Goal;
            break;
        }
    }
    let safe = steps.iter().all(|st| !st.collided);
    let success = match env.task.task {
        TaskKind::Goal => reached,
        TaskKind::Circle => safe,
    };
    Ok(EpisodeRecord {
        steps,
        reward: total,
        success,
        safe,
        goal,
    })
}

/// Learned (or oracle) components of an agent.
#[derive(Clone, Debug)]
pub struct Agent {
    pub cfg: ExperimentConfig,
    pub ensemble: PnnEnsemble,
    pub cbf: LipschitzCbf,
    pub classifier: SafetyClassifier,
    pub oracle: (OracleModel, HandcraftedCbf),
}

impl Agent {
    /// Fresh randomly initialized networks.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = RandomStream::new(cfg.seed, STREAM_TRAIN).derive(TAG_INIT);
        let goal_features = cfg.task == TaskKind::Goal;
        let l = &cfg.learning;
        let ensemble = PnnEnsemble::new(cfg.env, goal_features, l.ensemble.size, &l.ensemble.arch, &mut root.derive(0));
        let cbf = LipschitzCbf::new(cfg.env, &l.cbf.arch, &mut root.derive(1));
        let classifier = SafetyClassifier::new(cfg.env, &l.classifier.arch, &mut root.derive(2));
        let oracle = oracle_components(cfg.env, &cfg.env_params(), &cfg.task_spec().layout, &cfg.oracle);
        Ok(Self {
            cfg,
            ensemble,
            cbf,
            classifier,
            oracle,
        })
    }

    pub fn policy(&self) -> Policy<'_> {
        match self.cfg.agent {
            AgentKind::Pects => Policy::Constrained {
                model: &self.ensemble,
                barrier: &self.cbf,
            },
            AgentKind::PetsSc => Policy::Penalty {
                model: &self.ensemble,
                predictor: &self.classifier,
            },
            AgentKind::OraclePects => Policy::Constrained {
                model: &self.oracle.0,
                barrier: &self.oracle.1,
            },
        }
    }

    /// Refit the ensemble and then the safety component on the current data.
    pub fn retrain(&mut self, transitions: &TransitionBuffer, buffers: &SafetyBuffers, rng: &RandomStream) -> Result<Option<f64>> {
        let l = &self.cfg.learning;
        match self.cfg.agent {
            AgentKind::OraclePects => Ok(None),
            AgentKind::Pects => {
                train_ensemble(&mut self.ensemble, transitions, &l.ensemble, &rng.derive(0))?;
                let rep = train_cbf(&mut self.cbf, buffers, &self.ensemble, self.cfg.context_template(), &l.cbf, &rng.derive(1))?;
                Ok(Some(rep.max_certified))
            }
            AgentKind::PetsSc => {
                train_ensemble(&mut self.ensemble, transitions, &l.ensemble, &rng.derive(0))?;
                train_classifier(&mut self.classifier, buffers, &l.classifier, &rng.derive(1))?;
                Ok(None)
            }
        }
    }
}

/// One metrics row per training episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub reward: f64,
    pub steps: usize,
    pub success: bool,
    pub safe: bool,
    pub recovery_steps: usize,
    pub restarts: usize,
    pub explore: bool,
    /// Largest certified barrier slope seen while retraining after this
    /// episode (NaN when no barrier was trained).
    pub certified: f64,
}

impl EpisodeMetrics {
    pub fn recovery_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.recovery_steps as f64 / self.steps as f64
        }
    }
}

pub const METRICS_HEADER: &str = "episode,reward,steps,success,safe,recovery_steps,restarts,explore,certified";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[EpisodeMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in rows {
        writeln!(
            w,
            "{},{:?},{},{},{},{},{},{},{:?}",
            m.episode, m.reward, m.steps, m.success, m.safe, m.recovery_steps, m.restarts, m.explore, m.certified
        )?;
    }
    Ok(())
}

pub struct TrainOutput {
    pub agent: Agent,
    pub metrics: Vec<EpisodeMetrics>,
    pub transitions: TransitionBuffer,
    pub buffers: SafetyBuffers,
}

/// Full online training run. `on_episode` sees each metrics row as soon as
/// it is final.
pub fn train(cfg: &ExperimentConfig, on_episode: &mut dyn FnMut(&EpisodeMetrics)) -> Result<TrainOutput> {
    let mut agent = Agent::new(cfg.clone())?;
    let root = RandomStream::new(cfg.seed, STREAM_TRAIN);
    let mut env = Env::new(cfg.env, cfg.env_params(), cfg.train_task_spec());
    let mut transitions = TransitionBuffer::new(cfg.env, cfg.task, cfg.circle_radius);
    let mut buffers = SafetyBuffers::new(cfg.learning.buffers.clone());
    let mut metrics = Vec::with_capacity(cfg.episodes);
    let learns = cfg.agent != AgentKind::OraclePects;
    for ep in 0..cfg.episodes {
        let explore = learns && ep < cfg.exploration_episodes;
        let policy = if explore { Policy::Random } else { agent.policy() };
        let ingest = Ingest {
            sensor: &cfg.sensor,
            transitions: &mut transitions,
            buffers: &mut buffers,
        };
        let rec = run_episode(policy, &mut env, &cfg.planner, Some(ingest), &root.derive_path(&[TAG_EPISODE, ep as u64]))?;
        let certified = if learns && ep + 1 >= cfg.exploration_episodes {
            agent.retrain(&transitions, &buffers, &root.derive_path(&[TAG_RETRAIN, ep as u64]))?
        } else {
            None
        };
        let row = EpisodeMetrics {
            episode: ep,
            reward: rec.reward,
            steps: rec.len(),
            success: rec.success,
            safe: rec.safe,
            recovery_steps: rec.recovery_steps(),
            restarts: rec.restarts(),
            explore,
            certified: certified.unwrap_or(f64::NAN),
        };
        on_episode(&row);
        metrics.push(row);
    }
    Ok(TrainOutput {
        agent,
        metrics,
        transitions,
        buffers,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ep_reward_mean: f64,
    pub ep_reward_std: f64,
    pub success_pct: f64,
    pub safe_pct: f64,
    pub n_episodes: usize,
}

impl EvalSummary {
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let n = records.len() as f64;
        let mean = records.iter().map(|r| r.reward).sum::<f64>() / n;
        let var = records.iter().map(|r| (r.reward - mean).powi(2)).sum::<f64>() / n;
        let pct = |f: &dyn Fn(&EpisodeRecord) -> bool| 100.0 * records.iter().filter(|r| f(r)).count() as f64 / n;
        Self {
            ep_reward_mean: mean,
            ep_reward_std: var.sqrt(),
            success_pct: pct(&|r| r.success),
            safe_pct: pct(&|r| r.safe),
            n_episodes: records.len(),
        }
    }
}

/// Frozen-policy evaluation; episodes run in parallel with independent
/// seeds, so the result does not depend on the thread count.
pub fn evaluate(agent: &Agent, n_episodes: usize, seed: u64) -> Result<(EvalSummary, Vec<EpisodeRecord>)> {
    if n_episodes == 0 {
        return Err(Error::InvalidInput("evaluation needs at least one episode".into()));
    }
    let cfg = &agent.cfg;
    let root = RandomStream::new(seed, STREAM_EVAL);
    let env = Env::new(cfg.env, cfg.env_params(), cfg.task_spec());
    let records = (0..n_episodes)
        .into_par_iter()
        .map(|ep| run_episode(agent.policy(), &mut env.clone(), &cfg.planner, None, &root.derive(ep as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalSummary::from_records(&records), records))
}

pub fn trajectories_header(kind: EnvKind) -> String {
    let mut cols = vec!["episode".to_string(), "step".into()];
    cols.extend((0..kind.state_dim()).map(|i| format!("s{i}")));
    cols.extend((0..ACTION_DIM).map(|i| format!("a{i}")));
    cols.extend(["reward", "collided", "mode"].map(String::from));
    cols.join(",")
}

pub fn write_trajectories_csv<W: Write>(mut w: W, kind: EnvKind, records: &[EpisodeRecord]) -> Result<()> {
    writeln!(w, "{}", trajectories_header(kind))?;
    for (e, rec) in records.iter().enumerate() {
        for (t, st) in rec.steps.iter().enumerate() {
            write!(w, "{e},{t}")?;
            for v in st.state.iter().chain(&st.action) {
                write!(w, ",{v:?}")?;
            }
            writeln!(w, ",{:?},{},{}", st.reward, st.collided, st.mode.as_str())?;
        }
    }
    Ok(())
}
