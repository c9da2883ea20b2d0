//! Sampling-based MPC with barrier-constrained trajectory sampling.
//!
//! Candidates are rolled out in lockstep: every particle advances one step,
//! then candidates with a violating particle inherit the action prefix,
//! particle history and accumulated reward of a random safe candidate. Two
//! stages run per call: an MPPI refinement of the sampling mean, then a final
//! resample from which the best candidate is returned. When every candidate
//! is unsafe the stage restarts from a zero mean; after `max_restarts`
//! restarts the planner switches to recovery mode and maximizes discounted
//! safety margins instead of reward.
//!
//! Randomness is keyed by `(generation, candidate, particle, step)` so the
//! result does not depend on how candidate chunks are scheduled on threads.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, TaskContext, ACTION_DIM};
use crate::error::{Error, Result};
use crate::model::{Barrier, DynamicsModel, SafetyPredictor};
use crate::rng::RandomStream;

const TAG_ROLLOUT: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_DONOR: u64 = 3;

/// Stand-in objective contribution for non-finite model outputs.
pub const NONFINITE_PENALTY: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Rollout horizon; the robot's default when absent.
    pub horizon: Option<usize>,
    pub candidates: usize,
    pub particles: usize,
    pub beta: f64,
    pub action_noise_std: Vec<f64>,
    pub gamma: f64,
    pub kappa: f64,
    pub max_restarts: usize,
    pub stages: usize,
    /// Candidates per parallel work item. Results do not depend on it.
    pub chunk_size: usize,
    /// Per-step reward added for predicted-unsafe states (penalty baseline).
    pub unsafe_penalty: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            candidates: 400,
            particles: 5,
            beta: 0.7,
            action_noise_std: vec![0.3; ACTION_DIM],
            gamma: 10.0,
            kappa: 0.95,
            max_restarts: 5,
            stages: 2,
            chunk_size: 50,
            unsafe_penalty: -1000.0,
        }
    }
}

impl PlannerConfig {
    pub fn horizon_for(&self, kind: EnvKind) -> usize {
        self.horizon.unwrap_or_else(|| kind.default_horizon())
    }

    pub fn validate(&self) -> Result<()> {
        let f = |n: &str| format!("planner.{n}");
        if self.horizon == Some(0) {
            return Err(Error::config(f("horizon"), "must be >= 1"));
        }
        if self.candidates < 2 {
            return Err(Error::config(f("candidates"), "must be >= 2"));
        }
        if self.particles < 1 {
            return Err(Error::config(f("particles"), "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(f("beta"), "must be in [0, 1]"));
        }
        if self.action_noise_std.len() != ACTION_DIM || self.action_noise_std.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config(f("action_noise_std"), "needs one finite value >= 0 per action dimension"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(f("gamma"), "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::config(f("kappa"), "must be in [0, 1]"));
        }
        if self.stages < 1 {
            return Err(Error::config(f("stages"), "must be >= 1"));
        }
        if self.chunk_size < 1 {
            return Err(Error::config(f("chunk_size"), "must be >= 1"));
        }
        if !self.unsafe_penalty.is_finite() {
            return Err(Error::config(f("unsafe_penalty"), "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Nominal,
    Recovery,
}

impl PlanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Nominal => "nominal",
            PlanMode::Recovery => "recovery",
        }
    }
}

/// What the rollouts optimize and whether the barrier constraint is hard.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    /// Task reward subject to the per-particle barrier condition.
    Constrained(&'a dyn Barrier),
    /// Task reward only.
    Unconstrained,
    /// Task reward plus a fixed penalty whenever the predictor flags the
    /// sampled next state.
    Penalty(&'a dyn SafetyPredictor),
    /// Discounted safety margin, no hard constraint.
    Recovery(&'a dyn Barrier),
}

impl Objective<'_> {
    fn barrier(&self) -> Option<&dyn Barrier> {
        match *self {
            Objective::Constrained(h) | Objective::Recovery(h) => Some(h),
            _ => None,
        }
    }
}

/// `h(mu) - kappa h(s) - L_h sqrt(tr Sigma)`.
#[inline]
pub fn safety_margin(h_mu: f64, trace_cov: f64, h_cur: f64, kappa: f64, lipschitz: f64) -> f64 {
    h_mu - kappa * h_cur - lipschitz * trace_cov.max(0.0).sqrt()
}

/// Shift the previous solution by one step (repeating the last action);
/// zeros on the first call. Returns `(mean, a_init)`.
pub fn warm_start(prev: Option<ArrayView2<f64>>, horizon: usize) -> (Array2<f64>, Array1<f64>) {
    match prev {
        Some(p) if p.nrows() > 0 => {
            let mut mean = Array2::zeros((horizon, p.ncols()));
            for t in 0..horizon {
                let src = (t + 1).min(p.nrows() - 1);
                mean.row_mut(t).assign(&p.row(src));
            }
            (mean, p.row(0).to_owned())
        }
        _ => (Array2::zeros((horizon, ACTION_DIM)), Array1::zeros(ACTION_DIM)),
    }
}

/// Filtered Gaussian sequences `a_t = beta n_t + (1 - beta) a_{t-1}`, clamped
/// to `[-1, 1]`. Candidate `i` draws from its own keyed stream.
pub fn generate_sequences(mean: ArrayView2<f64>, a_init: &[f64], cfg: &PlannerConfig, generation: u64, rng: &RandomStream) -> Array3<f64> {
    let (h, q) = mean.dim();
    let n = cfg.candidates;
    let mut out = Array3::zeros((n, h, q));
    for i in 0..n {
        let mut stream = rng.derive_path(&[TAG_NOISE, generation, i as u64]);
        let mut prev: Vec<f64> = a_init.to_vec();
        for t in 0..h {
            for d in 0..q {
                let noise = mean[[t, d]] + cfg.action_noise_std[d] * stream.normal();
                let a = (cfg.beta * noise + (1.0 - cfg.beta) * prev[d]).clamp(-1.0, 1.0);
                out[[i, t, d]] = a;
                prev[d] = a;
            }
        }
    }
    out
}

/// Exponentially weighted mean of the candidate sequences (max-shifted).
pub fn mppi_update(actions: &Array3<f64>, r_hat: &[f64], gamma: f64) -> Array2<f64> {
    let max = r_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = r_hat.iter().map(|r| (gamma * (r - max)).exp()).collect();
    let total: f64 = w.iter().sum();
    let (_, h, q) = actions.dim();
    let mut mean = Array2::zeros((h, q));
    for (i, wi) in w.iter().enumerate() {
        mean.scaled_add(*wi / total, &actions.index_axis(Axis(0), i));
    }
    mean
}

/// Lowest index among the maximizers.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Rollout state of all candidates. Particle row `i * P + p` belongs to
/// candidate `i`.
#[derive(Clone, Debug)]
pub struct CandidateBatch {
    pub particles: usize,
    /// `N x H x q` action sequences.
    pub actions: Array3<f64>,
    /// `N*P x (H+1) x n` particle states; index 0 is the start state.
    pub states: Array3<f64>,
    /// Barrier value of each recorded particle state (NaN when unused).
    pub barrier: Array2<f64>,
    /// `N*P x H` safety margins (NaN when unused).
    pub margins: Array2<f64>,
    /// `N*P x H` per-step objective contributions.
    pub rewards: Array2<f64>,
    /// `N*P x H` ensemble member used at each step.
    pub members: Array2<u32>,
    /// Running sum of `rewards` per particle.
    pub cum: Array1<f64>,
    pub unsafe_flags: Vec<bool>,
    pub replacements: usize,
    pub nonfinite: usize,
}

impl CandidateBatch {
    pub fn new(s0: &[f64], actions: Array3<f64>, particles: usize) -> Self {
        let (n, h, _) = actions.dim();
        let rows = n * particles;
        let mut states = Array3::from_elem((rows, h + 1, s0.len()), f64::NAN);
        for r in 0..rows {
            for (j, v) in s0.iter().enumerate() {
                states[[r, 0, j]] = *v;
            }
        }
        Self {
            particles,
            actions,
            states,
            barrier: Array2::from_elem((rows, h + 1), f64::NAN),
            margins: Array2::from_elem((rows, h), f64::NAN),
            rewards: Array2::zeros((rows, h)),
            members: Array2::zeros((rows, h)),
            cum: Array1::zeros(rows),
            unsafe_flags: vec![false; n],
            replacements: 0,
            nonfinite: 0,
        }
    }

    pub fn candidates(&self) -> usize {
        self.actions.dim().0
    }

    pub fn horizon(&self) -> usize {
        self.actions.dim().1
    }

    /// Mean accumulated objective of each candidate over its particles.
    pub fn r_hat(&self) -> Vec<f64> {
        let p = self.particles;
        (0..self.candidates())
            .map(|i| self.cum.slice(s![i * p..(i + 1) * p]).sum() / p as f64)
            .collect()
    }

    /// Copies candidate `donor`'s actions `0..=tau` and particle records
    /// through step `tau + 1` into candidate `target`.
    pub fn copy_prefix(&mut self, target: usize, donor: usize, tau: usize) {
        let p = self.particles;
        let src = self.actions.slice(s![donor, ..=tau, ..]).to_owned();
        self.actions.slice_mut(s![target, ..=tau, ..]).assign(&src);
        for k in 0..p {
            let (t, d) = (target * p + k, donor * p + k);
            let st = self.states.slice(s![d, ..=tau + 1, ..]).to_owned();
            self.states.slice_mut(s![t, ..=tau + 1, ..]).assign(&st);
            let b = self.barrier.slice(s![d, ..=tau + 1]).to_owned();
            self.barrier.slice_mut(s![t, ..=tau + 1]).assign(&b);
            let m = self.margins.slice(s![d, ..=tau]).to_owned();
            self.margins.slice_mut(s![t, ..=tau]).assign(&m);
            let r = self.rewards.slice(s![d, ..=tau]).to_owned();
            self.rewards.slice_mut(s![t, ..=tau]).assign(&r);
            let e = self.members.slice(s![d, ..=tau]).to_owned();
            self.members.slice_mut(s![t, ..=tau]).assign(&e);
            self.cum[t] = self.cum[d];
        }
        self.unsafe_flags[target] = false;
        self.replacements += 1;
    }
}

/// Outputs of one rollout step for a contiguous block of particle rows.
struct StepBlock {
    next: Array2<f64>,
    h_next: Option<Array1<f64>>,
    margins: Option<Array1<f64>>,
    rewards: Array1<f64>,
    members: Vec<u32>,
    nonfinite: usize,
}

struct Rollout<'a> {
    model: &'a dyn DynamicsModel,
    objective: Objective<'a>,
    ctx: &'a TaskContext,
    cfg: &'a PlannerConfig,
    rng: &'a RandomStream,
    generation: u64,
}

impl Rollout<'_> {
    fn step_block(&self, batch: &CandidateBatch, c0: usize, c1: usize, tau: usize) -> StepBlock {
        let p = batch.particles;
        let n = batch.states.dim().2;
        let rows = (c1 - c0) * p;
        let e_count = self.model.ensemble_size().max(1);
        let mut members = vec![0u32; rows];
        let mut noise = vec![0.0; rows * (n + 1)];
        for k in 0..rows {
            let (i, pp) = (c0 + k / p, k % p);
            let mut st = self.rng.derive_path(&[TAG_ROLLOUT, self.generation, i as u64, pp as u64, tau as u64]);
            members[k] = st.index(e_count) as u32;
            for z in &mut noise[k * (n + 1)..(k + 1) * (n + 1)] {
                *z = st.normal();
            }
        }
        let h1 = batch.states.dim().1;
        let h = batch.actions.dim().1;
        let st_all = batch.states.as_slice().expect("standard layout");
        let act_all = batch.actions.as_slice().expect("standard layout");
        let mut mu = vec![0.0; rows * n];
        let mut var = vec![0.0; rows * n];
        let mut r_mu = vec![0.0; rows];
        let mut r_var = vec![0.0; rows];
        let mut idx = Vec::with_capacity(rows);
        for e in 0..e_count as u32 {
            idx.clear();
            idx.extend((0..rows).filter(|&k| members[k] == e));
            if idx.is_empty() {
                continue;
            }
            let mut s_in = Vec::with_capacity(idx.len() * n);
            let mut a_in = Vec::with_capacity(idx.len() * ACTION_DIM);
            for &k in &idx {
                let so = ((c0 * p + k) * h1 + tau) * n;
                s_in.extend_from_slice(&st_all[so..so + n]);
                let ao = ((c0 + k / p) * h + tau) * ACTION_DIM;
                a_in.extend_from_slice(&act_all[ao..ao + ACTION_DIM]);
            }
            let s_in = Array2::from_shape_vec((idx.len(), n), s_in).expect("shape");
            let a_in = Array2::from_shape_vec((idx.len(), ACTION_DIM), a_in).expect("shape");
            let pred = self.model.predict(e as usize, s_in.view(), a_in.view(), self.ctx);
            for (j, &k) in idx.iter().enumerate() {
                for d in 0..n {
                    mu[k * n + d] = pred.next_mean[[j, d]];
                    var[k * n + d] = pred.next_var[[j, d]];
                }
                r_mu[k] = pred.reward_mean[j];
                r_var[k] = pred.reward_var[j];
            }
        }
        let mut next = vec![0.0; rows * n];
        let mut rewards = Array1::zeros(rows);
        let mut trace = vec![0.0; rows];
        let mut finite = vec![true; rows];
        let mut nonfinite = 0;
        for k in 0..rows {
            let mut tr = 0.0;
            let mut ok = true;
            for d in 0..n {
                let v = var[k * n + d].max(0.0);
                tr += v;
                let x = mu[k * n + d] + v.sqrt() * noise[k * (n + 1) + d];
                ok &= x.is_finite();
                next[k * n + d] = x;
            }
            trace[k] = tr;
            rewards[k] = r_mu[k] + r_var[k].max(0.0).sqrt() * noise[k * (n + 1) + n];
            if !(ok && rewards[k].is_finite() && tr.is_finite()) {
                finite[k] = false;
                nonfinite += 1;
            }
        }
        let next = Array2::from_shape_vec((rows, n), next).expect("shape");
        let mut h_next = None;
        let mut margins = None;
        match self.objective {
            Objective::Constrained(h) | Objective::Recovery(h) => {
                let mut stacked = mu;
                stacked.extend_from_slice(next.as_slice().expect("standard layout"));
                let stacked = Array2::from_shape_vec((2 * rows, n), stacked).expect("shape");
                let hv = h.values(stacked.view());
                let lip = h.lipschitz();
                let m = Array1::from_shape_fn(rows, |k| {
                    if !finite[k] {
                        return f64::NAN;
                    }
                    let h_cur = batch.barrier[[c0 * p + k, tau]];
                    safety_margin(hv[k], trace[k], h_cur, self.cfg.kappa, lip)
                });
                if let Objective::Recovery(_) = self.objective {
                    let w = 1.0 / (tau as f64 + 1.0);
                    for k in 0..rows {
                        rewards[k] = if m[k].is_finite() { w * m[k] } else { NONFINITE_PENALTY };
                    }
                }
                h_next = Some(hv.slice(s![rows..]).to_owned());
                margins = Some(m);
            }
            Objective::Penalty(c) => {
                let flags = c.predict_unsafe(next.view());
                for k in 0..rows {
                    if flags[k] {
                        rewards[k] += self.cfg.unsafe_penalty;
                    }
                }
            }
            Objective::Unconstrained => {}
        }
        for k in 0..rows {
            if !finite[k] {
                rewards[k] = NONFINITE_PENALTY;
            }
        }
        StepBlock {
            next,
            h_next,
            margins,
            rewards,
            members,
            nonfinite,
        }
    }

    /// Advances every candidate one step and records the results. Returns the
    /// per-candidate step safety (all particles with margin >= 0).
    fn advance(&self, batch: &mut CandidateBatch, tau: usize) -> Vec<bool> {
        let n_cand = batch.candidates();
        let chunk = self.cfg.chunk_size.max(1);
        let blocks: Vec<(usize, usize)> = (0..n_cand).step_by(chunk).map(|c0| (c0, (c0 + chunk).min(n_cand))).collect();
        let outs: Vec<StepBlock> = {
            let b: &CandidateBatch = batch;
            blocks.par_iter().map(|&(c0, c1)| self.step_block(b, c0, c1, tau)).collect()
        };
        let p = batch.particles;
        let (h1, n) = (batch.states.dim().1, batch.states.dim().2);
        let mut safe = vec![true; n_cand];
        for (&(c0, _), out) in blocks.iter().zip(outs) {
            let r0 = c0 * p;
            let next = out.next.as_slice().expect("standard layout");
            let states = batch.states.as_slice_mut().expect("standard layout");
            for k in 0..out.rewards.len() {
                let r = r0 + k;
                let o = (r * h1 + tau + 1) * n;
                states[o..o + n].copy_from_slice(&next[k * n..(k + 1) * n]);
            }
            for k in 0..out.rewards.len() {
                let r = r0 + k;
                batch.rewards[[r, tau]] = out.rewards[k];
                batch.cum[r] += out.rewards[k];
                batch.members[[r, tau]] = out.members[k];
                if let Some(h) = &out.h_next {
                    batch.barrier[[r, tau + 1]] = h[k];
                }
                if let Some(m) = &out.margins {
                    batch.margins[[r, tau]] = m[k];
                    if !(m[k] >= 0.0) {
                        safe[r / p] = false;
                    }
                }
            }
            batch.nonfinite += out.nonfinite;
        }
        safe
    }

    /// Full lockstep rollout. With a hard constraint, unsafe candidates take
    /// over a random safe candidate's prefix after each step; `Err(())`
    /// signals that every candidate was unsafe at some step.
    fn run(&self, batch: &mut CandidateBatch, s0: &[f64]) -> std::result::Result<(), ()> {
        if let Some(h) = self.objective.barrier() {
            let row = ArrayView2::from_shape((1, s0.len()), s0).expect("row");
            let h0 = h.values(row)[0];
            batch.barrier.column_mut(0).fill(h0);
        }
        let hard = matches!(self.objective, Objective::Constrained(_));
        for tau in 0..batch.horizon() {
            let safe = self.advance(batch, tau);
            if !hard {
                continue;
            }
            let pool: Vec<usize> = (0..safe.len()).filter(|&i| safe[i]).collect();
            if pool.is_empty() {
                batch.unsafe_flags.iter_mut().for_each(|f| *f = true);
                return Err(());
            }
            for i in 0..safe.len() {
                if !safe[i] {
                    batch.unsafe_flags[i] = true;
                    let mut st = self.rng.derive_path(&[TAG_DONOR, self.generation, tau as u64, i as u64]);
                    let donor = pool[st.index(pool.len())];
                    batch.copy_prefix(i, donor, tau);
                }
            }
        }
        Ok(())
    }
}

/// Recorded particle trajectories of the returned sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleRecord {
    /// `P x (H+1) x n`.
    pub states: Array3<f64>,
    /// `P x H`.
    pub margins: Array2<f64>,
    /// `P x H`.
    pub rewards: Array2<f64>,
    pub members: Array2<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub restarts: usize,
    pub replacements: usize,
    /// Smallest recorded margin of the returned sequence (NaN if unused).
    pub min_margin: f64,
    /// Mean predicted objective of the returned sequence.
    pub r_hat: f64,
    pub nonfinite: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    /// `H x q`.
    pub action_sequence: Array2<f64>,
    pub applied_action: Vec<f64>,
    pub mode: PlanMode,
    pub diagnostics: PlanDiagnostics,
    pub particles: ParticleRecord,
}

struct Search<'a> {
    s0: &'a [f64],
    model: &'a dyn DynamicsModel,
    ctx: &'a TaskContext,
    cfg: &'a PlannerConfig,
    rng: &'a RandomStream,
    horizon: usize,
    generation: u64,
    replacements: usize,
    nonfinite: usize,
}

enum StageOutcome {
    Done(CandidateBatch),
    AllUnsafe,
}

impl Search<'_> {
    fn stage(&mut self, mean: &Array2<f64>, a_init: &Array1<f64>, objective: Objective) -> StageOutcome {
        let g = self.generation;
        self.generation += 1;
        let actions = generate_sequences(mean.view(), a_init.as_slice().expect("contiguous"), self.cfg, g, self.rng);
        let mut batch = CandidateBatch::new(self.s0, actions, self.cfg.particles);
        let roll = Rollout {
            model: self.model,
            objective,
            ctx: self.ctx,
            cfg: self.cfg,
            rng: self.rng,
            generation: g,
        };
        let ok = roll.run(&mut batch, self.s0);
        self.replacements += batch.replacements;
        self.nonfinite += batch.nonfinite;
        match ok {
            Ok(()) => StageOutcome::Done(batch),
            Err(()) => StageOutcome::AllUnsafe,
        }
    }

    /// Two-stage optimization. `None` when the restart budget runs out.
    fn optimize(&mut self, prev: Option<ArrayView2<f64>>, objective: Objective, restarts: &mut usize) -> Option<(CandidateBatch, usize)> {
        let (mut mean, mut a_init) = warm_start(prev, self.horizon);
        let mut stage = 0;
        loop {
            if stage > 0 {
                a_init = mean.row(0).to_owned();
            }
            match self.stage(&mean, &a_init, objective) {
                StageOutcome::AllUnsafe => {
                    if *restarts >= self.cfg.max_restarts {
                        return None;
                    }
                    *restarts += 1;
                    mean.fill(0.0);
                    a_init.fill(0.0);
                }
                StageOutcome::Done(batch) => {
                    let r_hat = batch.r_hat();
                    if stage + 1 < self.cfg.stages {
                        mean = mppi_update(&batch.actions, &r_hat, self.cfg.gamma);
                        stage += 1;
                    } else {
                        let best = argmax_first(&r_hat);
                        return Some((batch, best));
                    }
                }
            }
        }
    }

    fn result(&self, batch: &CandidateBatch, best: usize, mode: PlanMode, restarts: usize) -> PlanResult {
        let p = batch.particles;
        let rows = s![best * p..(best + 1) * p, ..];
        let margins = batch.margins.slice(rows).to_owned();
        let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
        let seq = batch.actions.index_axis(Axis(0), best).to_owned();
        PlanResult {
            applied_action: seq.row(0).to_vec(),
            action_sequence: seq,
            mode,
            diagnostics: PlanDiagnostics {
                restarts,
                replacements: self.replacements,
                min_margin: if margins.iter().any(|m| m.is_nan()) { f64::NAN } else { min_margin },
                r_hat: batch.r_hat()[best],
                nonfinite: self.nonfinite,
            },
            particles: ParticleRecord {
                states: batch.states.slice(s![best * p..(best + 1) * p, .., ..]).to_owned(),
                margins,
                rewards: batch.rewards.slice(rows).to_owned(),
                members: batch.members.slice(rows).to_owned(),
            },
        }
    }
}

fn check_start(s0: &[f64], model: &dyn DynamicsModel) -> Result<()> {
    if s0.len() != model.kind().state_dim() || s0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("start state must be finite and match the robot".into()));
    }
    Ok(())
}

fn search<'a>(s0: &'a [f64], model: &'a dyn DynamicsModel, ctx: &'a TaskContext, cfg: &'a PlannerConfig, rng: &'a RandomStream) -> Search<'a> {
    Search {
        s0,
        model,
        ctx,
        cfg,
        rng,
        horizon: cfg.horizon_for(model.kind()),
        generation: 0,
        replacements: 0,
        nonfinite: 0,
    }
}

/// Barrier-constrained planning with restarts and the recovery fallback.
pub fn plan(
    s0: &[f64],
    model: &dyn DynamicsModel,
    barrier: &dyn Barrier,
    ctx: &TaskContext,
    cfg: &PlannerConfig,
    prev: Option<ArrayView2<f64>>,
    rng: &RandomStream,
) -> Result<PlanResult> {
    check_start(s0, model)?;
    let mut sr = search(s0, model, ctx, cfg, rng);
    let mut restarts = 0;
    match sr.optimize(prev, Objective::Constrained(barrier), &mut restarts) {
        Some((batch, best)) => Ok(sr.result(&batch, best, PlanMode::Nominal, restarts)),
        None => {
            let mut none = 0;
            let (batch, best) = sr
                .optimize(None, Objective::Recovery(barrier), &mut none)
                .expect("recovery has no hard constraint");
            Ok(sr.result(&batch, best, PlanMode::Recovery, restarts))
        }
    }
}

/// Recovery-mode planning on its own: maximize the discounted safety margin.
pub fn plan_recovery(
    s0: &[f64],
    model: &dyn DynamicsModel,
    barrier: &dyn Barrier,
    ctx: &TaskContext,
    cfg: &PlannerConfig,
    rng: &RandomStream,
) -> Result<PlanResult> {
    check_start(s0, model)?;
    let mut sr = search(s0, model, ctx, cfg, rng);
    let mut none = 0;
    let (batch, best) = sr
        .optimize(None, Objective::Recovery(barrier), &mut none)
        .expect("recovery has no hard constraint");
    Ok(sr.result(&batch, best, PlanMode::Recovery, 0))
}

/// Plain two-stage MPPI on task reward.
pub fn plan_unconstrained(
    s0: &[f64],
    model: &dyn DynamicsModel,
    ctx: &TaskContext,
    cfg: &PlannerConfig,
    prev: Option<ArrayView2<f64>>,
    rng: &RandomStream,
) -> Result<PlanResult> {
    check_start(s0, model)?;
    let mut sr = search(s0, model, ctx, cfg, rng);
    let mut none = 0;
    let (batch, best) = sr.optimize(prev, Objective::Unconstrained, &mut none).expect("unconstrained");
    Ok(sr.result(&batch, best, PlanMode::Nominal, 0))
}

/// Two-stage MPPI with a per-step penalty on states the predictor flags.
pub fn plan_penalty(
    s0: &[f64],
    model: &dyn DynamicsModel,
    predictor: &dyn SafetyPredictor,
    ctx: &TaskContext,
    cfg: &PlannerConfig,
    prev: Option<ArrayView2<f64>>,
    rng: &RandomStream,
) -> Result<PlanResult> {
    check_start(s0, model)?;
    let mut sr = search(s0, model, ctx, cfg, rng);
    let mut none = 0;
    let (batch, best) = sr.optimize(prev, Objective::Penalty(predictor), &mut none).expect("penalty");
    Ok(sr.result(&batch, best, PlanMode::Nominal, 0))
}
