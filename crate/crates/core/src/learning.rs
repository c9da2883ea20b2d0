//! Data buffers and the training loops for the dynamics ensemble, the
//! barrier network and the penalty baseline's classifier.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, State, TaskContext, TaskKind, ACTION_DIM};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::model::{Barrier, DynamicsModel};
use crate::neural::classifier::ClassifierArch;
use crate::neural::lipschitz::CbfArch;
use crate::neural::pnn::PnnArch;
use crate::neural::{stack_rows, Activation, Adam, AdamConfig, LipschitzCbf, Normalizer, PnnEnsemble, SafetyClassifier};
use crate::rng::RandomStream;
use crate::sensor::{SafetyLabel, SafetyLabelBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: Vec<f64>,
    pub next_state: State,
    pub reward: f64,
    pub goal: Option<Point>,
}

/// Every executed transition of an experiment.
#[derive(Clone, Debug)]
pub struct TransitionBuffer {
    pub kind: EnvKind,
    pub task: TaskKind,
    pub circle_radius: f64,
    pub entries: Vec<Transition>,
}

impl TransitionBuffer {
    pub fn new(kind: EnvKind, task: TaskKind, circle_radius: f64) -> Self {
        Self {
            kind,
            task,
            circle_radius,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn context(&self, goal: Option<Point>) -> TaskContext {
        TaskContext {
            task: self.task,
            goal,
            circle_radius: self.circle_radius,
        }
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        let n = self.kind.state_dim();
        if t.state.len() != n || t.next_state.len() != n || t.action.len() != ACTION_DIM {
            return Err(Error::InvalidInput("transition dimensions do not match the robot".into()));
        }
        self.entries.push(t);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.kind.state_dim();
        let mut header: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        header.extend((0..ACTION_DIM).map(|i| format!("a{i}")));
        header.extend((0..n).map(|i| format!("next{i}")));
        header.extend(["reward".into(), "goal_x".into(), "goal_y".into()]);
        writeln!(w, "{}", header.join(","))?;
        for t in &self.entries {
            let mut row: Vec<String> = t.state.iter().chain(&t.action).chain(&t.next_state).map(|v| v.to_string()).collect();
            row.push(t.reward.to_string());
            match t.goal {
                Some(g) => row.extend([g[0].to_string(), g[1].to_string()]),
                None => row.extend([String::new(), String::new()]),
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Visited state and the action applied there.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaEntry {
    pub state: State,
    pub action: Vec<f64>,
    pub goal: Option<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferConfig {
    pub plus_cap: usize,
    pub minus_cap: usize,
    pub fea_cap: usize,
    pub safe_per_step: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            plus_cap: 100_000,
            minus_cap: 100_000,
            fea_cap: 100_000,
            safe_per_step: 200,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("plus_cap", self.plus_cap), ("minus_cap", self.minus_cap), ("fea_cap", self.fea_cap)] {
            if v == 0 {
                return Err(Error::config(format!("learning.buffers.{name}"), "must be >= 1"));
            }
        }
        Ok(())
    }
}

fn state_key(s: &[f64]) -> Vec<u64> {
    s.iter().map(|v| v.to_bits()).collect()
}

/// Safe / unsafe label buffers and the feasibility buffer, FIFO-capped.
/// A state is never held with both labels: the later label wins.
#[derive(Clone, Debug)]
pub struct SafetyBuffers {
    pub cfg: BufferConfig,
    plus: VecDeque<State>,
    minus: VecDeque<State>,
    fea: VecDeque<FeaEntry>,
    labels: HashMap<Vec<u64>, (SafetyLabel, usize)>,
}

impl SafetyBuffers {
    pub fn new(cfg: BufferConfig) -> Self {
        Self {
            cfg,
            plus: VecDeque::new(),
            minus: VecDeque::new(),
            fea: VecDeque::new(),
            labels: HashMap::new(),
        }
    }

    pub fn plus(&self) -> &VecDeque<State> {
        &self.plus
    }

    pub fn minus(&self) -> &VecDeque<State> {
        &self.minus
    }

    pub fn fea(&self) -> &VecDeque<FeaEntry> {
        &self.fea
    }

    fn forget(labels: &mut HashMap<Vec<u64>, (SafetyLabel, usize)>, s: &[f64]) {
        let key = state_key(s);
        if let Some(entry) = labels.get_mut(&key) {
            entry.1 -= 1;
            if entry.1 == 0 {
                labels.remove(&key);
            }
        }
    }

    pub fn insert_label(&mut self, s: State, label: SafetyLabel) {
        let key = state_key(&s);
        match self.labels.get_mut(&key) {
            Some(entry) if entry.0 != label => {
                let stale = match entry.0 {
                    SafetyLabel::Safe => &mut self.plus,
                    SafetyLabel::Unsafe => &mut self.minus,
                };
                stale.retain(|x| state_key(x) != key);
                *entry = (label, 1);
            }
            Some(entry) => entry.1 += 1,
            None => {
                self.labels.insert(key, (label, 1));
            }
        }
        let (buf, cap) = match label {
            SafetyLabel::Safe => (&mut self.plus, self.cfg.plus_cap),
            SafetyLabel::Unsafe => (&mut self.minus, self.cfg.minus_cap),
        };
        buf.push_back(s);
        while buf.len() > cap {
            if let Some(old) = buf.pop_front() {
                Self::forget(&mut self.labels, &old);
            }
        }
    }

    pub fn push_fea(&mut self, entry: FeaEntry) {
        self.fea.push_back(entry);
        while self.fea.len() > self.cfg.fea_cap {
            self.fea.pop_front();
        }
    }

    /// Adds one sensing pass: every unsafe label, and at most
    /// `safe_per_step` safe labels chosen uniformly.
    pub fn ingest_labels(&mut self, batch: &SafetyLabelBatch, rng: &mut RandomStream) {
        let mut safe: Vec<usize> = Vec::new();
        for (i, (s, l)) in batch.states.iter().zip(&batch.labels).enumerate() {
            match l {
                SafetyLabel::Unsafe => self.insert_label(s.clone(), SafetyLabel::Unsafe),
                SafetyLabel::Safe => safe.push(i),
            }
        }
        let keep = safe.len().min(self.cfg.safe_per_step);
        for k in 0..keep {
            let j = k + rng.index(safe.len() - k);
            safe.swap(k, j);
        }
        safe.truncate(keep);
        safe.sort_unstable();
        for i in safe {
            self.insert_label(batch.states[i].clone(), SafetyLabel::Safe);
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "buffer,state")?;
        for (name, buf) in [("plus", &self.plus), ("minus", &self.minus)] {
            for s in buf {
                let coords: Vec<String> = s.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{name},{}", coords.join(" "))?;
            }
        }
        for e in &self.fea {
            let coords: Vec<String> = e.state.iter().chain(&e.action).map(|v| v.to_string()).collect();
            writeln!(w, "fea,{}", coords.join(" "))?;
        }
        Ok(())
    }
}

/// One control step's worth of data.
pub fn ingest_step(
    bufs: &mut SafetyBuffers,
    transitions: &mut TransitionBuffer,
    transition: Transition,
    labels: &SafetyLabelBatch,
    rng: &mut RandomStream,
) -> Result<()> {
    bufs.ingest_labels(labels, rng);
    bufs.push_fea(FeaEntry {
        state: transition.state.clone(),
        action: transition.action.clone(),
        goal: transition.goal,
    });
    transitions.push(transition)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbfHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub eps_plus: f64,
    pub eps_minus: f64,
    pub eps_fea: f64,
    pub kappa: f64,
}

impl Default for CbfHyper {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 2.0,
            lambda3: 1.0,
            eps_plus: 0.05,
            eps_minus: 0.1,
            eps_fea: 0.01,
            kappa: 0.95,
        }
    }
}

impl CbfHyper {
    pub fn validate(&self) -> Result<()> {
        let f = |n: &str| format!("learning.cbf.hyper.{n}");
        for (n, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("eps_plus", self.eps_plus),
            ("eps_minus", self.eps_minus),
            ("eps_fea", self.eps_fea),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(f(n), "must be finite and >= 0"));
            }
        }
        if (2.0 * self.lambda1 - self.lambda2).abs() > 1e-12 {
            return Err(Error::config(f("lambda2"), "must equal 2 * lambda1"));
        }
        if self.eps_plus >= self.eps_minus {
            return Err(Error::config(f("eps_plus"), "must be < eps_minus"));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::config(f("kappa"), "must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleTrainConfig {
    pub size: usize,
    pub arch: PnnArch,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Floor and cap on minibatch steps per member per retraining pass.
    pub min_steps: usize,
    pub max_steps: usize,
    pub min_data: usize,
}

impl Default for EnsembleTrainConfig {
    fn default() -> Self {
        Self {
            size: 5,
            arch: PnnArch::default(),
            adam: AdamConfig::default(),
            batch_size: 256,
            epochs: 5,
            min_steps: 500,
            max_steps: 2000,
            min_data: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbfTrainConfig {
    pub arch: CbfArch,
    pub adam: AdamConfig,
    pub hyper: CbfHyper,
    pub batch_size: usize,
    pub steps: usize,
    /// Feasibility pairs drawn per retraining pass.
    pub fea_sample: usize,
}

impl Default for CbfTrainConfig {
    fn default() -> Self {
        Self {
            arch: CbfArch::default(),
            adam: AdamConfig::default(),
            hyper: CbfHyper::default(),
            batch_size: 256,
            steps: 1000,
            fea_sample: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub arch: ClassifierArch,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            adam: AdamConfig::default(),
            batch_size: 256,
            steps: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningConfig {
    pub buffers: BufferConfig,
    pub ensemble: EnsembleTrainConfig,
    pub cbf: CbfTrainConfig,
    pub classifier: ClassifierTrainConfig,
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        self.buffers.validate()?;
        self.cbf.hyper.validate()?;
        let e = &self.ensemble;
        if e.size == 0 {
            return Err(Error::config("learning.ensemble.size", "must be >= 1"));
        }
        for (name, v) in [
            ("learning.ensemble.batch_size", e.batch_size),
            ("learning.cbf.batch_size", self.cbf.batch_size),
            ("learning.classifier.batch_size", self.classifier.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if e.arch.logvar_min >= e.arch.logvar_max {
            return Err(Error::config("learning.ensemble.arch.logvar_min", "must be < logvar_max"));
        }
        if !matches!(self.cbf.arch.activation, Activation::Tanh | Activation::Relu) {
            return Err(Error::config("learning.cbf.arch.activation", "must be tanh or relu"));
        }
        if !(self.cbf.arch.lipschitz > 0.0) {
            return Err(Error::config("learning.cbf.arch.lipschitz", "must be > 0"));
        }
        for (name, a) in [
            ("learning.ensemble.adam.lr", &e.adam),
            ("learning.cbf.adam.lr", &self.cbf.adam),
            ("learning.classifier.adam.lr", &self.classifier.adam),
        ] {
            if !(a.lr > 0.0) {
                return Err(Error::config(name, "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Bootstrap resample of `0..n` (with replacement, size `n`).
pub fn bootstrap_indices(n: usize, rng: &mut RandomStream) -> Vec<usize> {
    (0..n).map(|_| rng.index(n)).collect()
}

/// Raw inputs and targets of every stored transition.
pub fn ensemble_dataset(ens: &PnnEnsemble, buf: &TransitionBuffer) -> (Array2<f64>, Array2<f64>) {
    let n = buf.kind.state_dim();
    let d_in = ens.input_dim();
    let mut x = Array2::zeros((buf.len(), d_in));
    let mut y = Array2::zeros((buf.len(), n + 1));
    for (i, t) in buf.entries.iter().enumerate() {
        let mut row = Vec::with_capacity(d_in);
        crate::neural::features::push_model_input(buf.kind, ens.goal_features, &t.state, &t.action, &buf.context(t.goal), &mut row);
        x.row_mut(i).assign(&Array1::from(row));
        for j in 0..n {
            y[[i, j]] = t.next_state[j] - t.state[j];
        }
        y[[i, n]] = t.reward;
    }
    (x, y)
}

/// Fits the ensemble on `buf`. Each member trains by NLL on its own
/// bootstrap resample; normalizers are fit on the whole buffer. Returns
/// `false` (ensemble untouched) when there is too little data.
pub fn train_ensemble(ens: &mut PnnEnsemble, buf: &TransitionBuffer, cfg: &EnsembleTrainConfig, rng: &RandomStream) -> Result<bool> {
    if buf.len() < cfg.min_data.max(1) {
        return Ok(false);
    }
    let (mut x, mut y) = ensemble_dataset(ens, buf);
    ens.input_norm = Normalizer::fit(x.view());
    ens.target_norm = Normalizer::fit(y.view());
    ens.input_norm.normalize(&mut x);
    ens.target_norm.normalize(&mut y);
    let n = buf.len();
    let batch = cfg.batch_size.min(n);
    let steps = (cfg.epochs * n.div_ceil(batch)).max(cfg.min_steps).min(cfg.max_steps);
    let results: Vec<Result<()>> = ens
        .members
        .par_iter_mut()
        .enumerate()
        .map(|(e, member)| {
            let mut stream = rng.derive(e as u64);
            let boot = bootstrap_indices(n, &mut stream);
            let mut adam = Adam::new(&member.net, cfg.adam);
            let mut order = boot.clone();
            let mut cursor = order.len();
            for _ in 0..steps {
                let mut idx = Vec::with_capacity(batch);
                while idx.len() < batch {
                    if cursor == order.len() {
                        shuffle(&mut order, &mut stream);
                        cursor = 0;
                    }
                    idx.push(order[cursor]);
                    cursor += 1;
                }
                let xb = x.select(Axis(0), &idx);
                let yb = y.select(Axis(0), &idx);
                let (loss, grads) = member.nll_and_grads(xb.view(), yb.view());
                if !loss.is_finite() {
                    return Err(Error::NonFinite("ensemble training loss"));
                }
                adam.step(&mut member.net, &grads);
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(true)
}

pub fn shuffle<T>(v: &mut [T], rng: &mut RandomStream) {
    for i in (1..v.len()).rev() {
        let j = rng.index(i + 1);
        v.swap(i, j);
    }
}

/// Feasibility pairs with the ensemble's predictions precomputed.
#[derive(Clone, Debug)]
pub struct FeaBatch {
    pub states: Array2<f64>,
    /// Predicted next-state mean per member.
    pub means: Vec<Array2<f64>>,
    /// `sqrt(tr Sigma)` over the state block, per member.
    pub std_traces: Vec<Array1<f64>>,
}

impl FeaBatch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn from_entries(entries: &[&FeaEntry], model: &dyn DynamicsModel, template: TaskContext) -> Self {
        let n = model.kind().state_dim();
        let states = stack_rows(&entries.iter().map(|e| e.state.as_slice()).collect::<Vec<_>>(), n);
        let actions = stack_rows(&entries.iter().map(|e| e.action.as_slice()).collect::<Vec<_>>(), ACTION_DIM);
        let mut means = Vec::new();
        let mut std_traces = Vec::new();
        for m in 0..model.ensemble_size() {
            // Predictions depend on the goal through the context, so group by goal.
            let mut mean = Array2::zeros((entries.len(), n));
            let mut tr = Array1::zeros(entries.len());
            let mut groups: Vec<(Option<Point>, Vec<usize>)> = Vec::new();
            for (i, e) in entries.iter().enumerate() {
                match groups.iter_mut().find(|(g, _)| *g == e.goal) {
                    Some((_, v)) => v.push(i),
                    None => groups.push((e.goal, vec![i])),
                }
            }
            for (goal, idx) in groups {
                let ctx = TaskContext { goal, ..template };
                let p = model.predict(m, states.select(Axis(0), &idx).view(), actions.select(Axis(0), &idx).view(), &ctx);
                for (k, &i) in idx.iter().enumerate() {
                    mean.row_mut(i).assign(&p.next_mean.row(k));
                    tr[i] = p.next_var.row(k).sum().sqrt();
                }
            }
            means.push(mean);
            std_traces.push(tr);
        }
        Self {
            states,
            means,
            std_traces,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            states: self.states.select(Axis(0), idx),
            means: self.means.iter().map(|m| m.select(Axis(0), idx)).collect(),
            std_traces: self.std_traces.iter().map(|t| Array1::from_iter(idx.iter().map(|&i| t[i]))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbfLoss {
    pub plus: f64,
    pub minus: f64,
    pub fea: f64,
    pub total: f64,
}

/// Composite barrier loss on explicit batches and its parameter gradients.
pub fn cbf_loss(
    cbf: &LipschitzCbf,
    plus: &Array2<f64>,
    minus: &Array2<f64>,
    fea: &FeaBatch,
    hyp: &CbfHyper,
) -> (CbfLoss, crate::neural::Grads) {
    let dim = cbf.kind.state_dim();
    let np = plus.nrows();
    let nm = minus.nrows();
    let nf = fea.len();
    let e = fea.means.len();
    let rows = np + nm + nf * (1 + e);
    let mut all = Array2::zeros((rows, dim));
    all.slice_mut(s![..np, ..]).assign(plus);
    all.slice_mut(s![np..np + nm, ..]).assign(minus);
    all.slice_mut(s![np + nm..np + nm + nf, ..]).assign(&fea.states);
    for (k, m) in fea.means.iter().enumerate() {
        let start = np + nm + nf * (1 + k);
        all.slice_mut(s![start..start + nf, ..]).assign(m);
    }
    let tape = cbf.net.forward_tape(cbf.features(all.view()).view());
    let h = tape.output.column(0);
    let mut d = Array2::zeros((rows, 1));
    let mut loss = CbfLoss {
        plus: 0.0,
        minus: 0.0,
        fea: 0.0,
        total: 0.0,
    };
    for i in 0..np {
        let v = -h[i] + hyp.eps_plus;
        if v > 0.0 {
            loss.plus += v / np as f64;
            d[[i, 0]] -= hyp.lambda1 / np as f64;
        }
    }
    for i in 0..nm {
        let v = h[np + i] + hyp.eps_minus;
        if v > 0.0 {
            loss.minus += v / nm as f64;
            d[[np + i, 0]] += hyp.lambda2 / nm as f64;
        }
    }
    if nf > 0 && e > 0 {
        let scale = 1.0 / (e * nf) as f64;
        for k in 0..e {
            for j in 0..nf {
                let s_row = np + nm + j;
                let mu_row = np + nm + nf * (1 + k) + j;
                let v = -h[mu_row] + hyp.kappa * h[s_row] + cbf.lipschitz * fea.std_traces[k][j] + hyp.eps_fea;
                if v > 0.0 {
                    loss.fea += v * scale;
                    d[[mu_row, 0]] -= hyp.lambda3 * scale;
                    d[[s_row, 0]] += hyp.lambda3 * hyp.kappa * scale;
                }
            }
        }
    }
    loss.total = hyp.lambda1 * loss.plus + hyp.lambda2 * loss.minus + hyp.lambda3 * loss.fea;
    let grads = cbf.net.backward(&tape, d.view());
    (loss, grads)
}

/// Audit of one barrier training pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CbfTrainReport {
    pub steps: usize,
    pub final_loss: Option<CbfLoss>,
    /// Largest product of certified layer norms seen after any step.
    pub max_certified: f64,
}

fn sample_rows(buf: &VecDeque<State>, k: usize, dim: usize, rng: &mut RandomStream) -> Array2<f64> {
    if buf.is_empty() {
        return Array2::zeros((0, dim));
    }
    let rows: Vec<&[f64]> = (0..k).map(|_| buf[rng.index(buf.len())].as_slice()).collect();
    stack_rows(&rows, dim)
}

/// Minibatch descent on the composite loss, projecting onto the certified
/// set after every step. The ensemble is only read.
pub fn train_cbf(
    cbf: &mut LipschitzCbf,
    bufs: &SafetyBuffers,
    model: &dyn DynamicsModel,
    template: TaskContext,
    cfg: &CbfTrainConfig,
    rng: &RandomStream,
) -> Result<CbfTrainReport> {
    let mut report = CbfTrainReport {
        max_certified: cbf.certified_bound(),
        ..Default::default()
    };
    if bufs.plus().is_empty() && bufs.minus().is_empty() && bufs.fea().is_empty() {
        return Ok(report);
    }
    let dim = cbf.kind.state_dim();
    let mut stream = rng.derive(0);
    let fea_all = if bufs.fea().is_empty() {
        None
    } else {
        let k = cfg.fea_sample.min(bufs.fea().len());
        let mut idx: Vec<usize> = (0..bufs.fea().len()).collect();
        if k < idx.len() {
            for i in 0..k {
                let j = i + stream.index(idx.len() - i);
                idx.swap(i, j);
            }
            idx.truncate(k);
        }
        let entries: Vec<&FeaEntry> = idx.iter().map(|&i| &bufs.fea()[i]).collect();
        Some(FeaBatch::from_entries(&entries, model, template))
    };
    let mut adam = Adam::new(&cbf.net, cfg.adam);
    for _ in 0..cfg.steps {
        let plus = sample_rows(bufs.plus(), cfg.batch_size, dim, &mut stream);
        let minus = sample_rows(bufs.minus(), cfg.batch_size, dim, &mut stream);
        let fea = match &fea_all {
            Some(f) => {
                let idx: Vec<usize> = (0..cfg.batch_size.min(f.len())).map(|_| stream.index(f.len())).collect();
                f.select(&idx)
            }
            None => FeaBatch {
                states: Array2::zeros((0, dim)),
                means: Vec::new(),
                std_traces: Vec::new(),
            },
        };
        let (loss, grads) = cbf_loss(cbf, &plus, &minus, &fea, &cfg.hyper);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("barrier training loss"));
        }
        adam.step(&mut cbf.net, &grads);
        cbf.renormalize();
        report.max_certified = report.max_certified.max(cbf.certified_bound());
        report.steps += 1;
        report.final_loss = Some(loss);
    }
    Ok(report)
}

/// Balanced binary cross-entropy training on the label buffers.
pub fn train_classifier(clf: &mut SafetyClassifier, bufs: &SafetyBuffers, cfg: &ClassifierTrainConfig, rng: &RandomStream) -> Result<()> {
    let dim = clf.kind.state_dim();
    if bufs.plus().is_empty() && bufs.minus().is_empty() {
        return Ok(());
    }
    let mut stream = rng.derive(0);
    let mut adam = Adam::new(&clf.net, cfg.adam);
    let half = cfg.batch_size.div_ceil(2);
    for _ in 0..cfg.steps {
        let plus = sample_rows(bufs.plus(), half, dim, &mut stream);
        let minus = sample_rows(bufs.minus(), half, dim, &mut stream);
        let x = ndarray::concatenate(Axis(0), &[plus.view(), minus.view()]).expect("concat");
        let mut y = Array1::zeros(x.nrows());
        y.slice_mut(s![plus.nrows()..]).fill(1.0);
        let (loss, grads) = clf.loss_and_grads(x.view(), y.view());
        if !loss.is_finite() {
            return Err(Error::NonFinite("classifier training loss"));
        }
        adam.step(&mut clf.net, &grads);
    }
    Ok(())
}

/// Mean held-out NLL of each member in normalized target space.
pub fn ensemble_nll(ens: &PnnEnsemble, buf: &TransitionBuffer) -> Vec<f64> {
    let (mut x, mut y) = ensemble_dataset(ens, buf);
    ens.input_norm.normalize(&mut x);
    ens.target_norm.normalize(&mut y);
    ens.members.iter().map(|m| m.nll(x.view(), y.view())).collect()
}

/// Barrier values of many states, for diagnostics.
pub fn barrier_values(h: &dyn Barrier, states: &[State], dim: usize) -> Array1<f64> {
    h.values(stack_rows(states, dim).view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::finite_diff_grad;

    fn labels(n_safe: usize, n_unsafe: usize) -> SafetyLabelBatch {
        let mut b = SafetyLabelBatch::default();
        for i in 0..n_safe {
            b.states.push(vec![i as f64, 0.0, 0.0]);
            b.labels.push(SafetyLabel::Safe);
        }
        for i in 0..n_unsafe {
            b.states.push(vec![i as f64, 1.0, 0.0]);
            b.labels.push(SafetyLabel::Unsafe);
        }
        b
    }

    #[test]
    fn ingest_bookkeeping() {
        let cfg = BufferConfig {
            safe_per_step: 40,
            ..BufferConfig::default()
        };
        let mut bufs = SafetyBuffers::new(cfg);
        let mut tb = TransitionBuffer::new(EnvKind::Unicycle, TaskKind::Circle, 1.5);
        let mut rng = RandomStream::new(1, 0);
        let t = Transition {
            state: vec![0.0; 3],
            action: vec![0.0; 2],
            next_state: vec![0.0; 3],
            reward: 0.0,
            goal: None,
        };
        ingest_step(&mut bufs, &mut tb, t.clone(), &labels(100, 3), &mut rng).unwrap();
        assert_eq!(bufs.plus().len(), 40);
        assert_eq!(bufs.minus().len(), 3);
        assert_eq!(bufs.fea().len(), 1);
        ingest_step(&mut bufs, &mut tb, t, &labels(10, 0), &mut rng).unwrap();
        assert_eq!(bufs.fea().len(), 2);
        assert_eq!(tb.len(), 2);
    }

    #[test]
    fn fifo_keeps_newest_and_later_label_wins() {
        let cfg = BufferConfig {
            plus_cap: 3,
            ..BufferConfig::default()
        };
        let mut bufs = SafetyBuffers::new(cfg);
        for i in 0..5 {
            bufs.insert_label(vec![i as f64], SafetyLabel::Safe);
        }
        let kept: Vec<f64> = bufs.plus().iter().map(|s| s[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        bufs.insert_label(vec![3.0], SafetyLabel::Unsafe);
        assert!(bufs.plus().iter().all(|s| s[0] != 3.0));
        assert_eq!(bufs.minus().len(), 1);
        bufs.insert_label(vec![3.0], SafetyLabel::Safe);
        assert!(bufs.minus().is_empty());
        // Evicted entries no longer block relabelling.
        bufs.insert_label(vec![0.0], SafetyLabel::Unsafe);
        assert_eq!(bufs.minus().len(), 1);
    }

    #[test]
    fn hyper_validation() {
        assert!(CbfHyper::default().validate().is_ok());
        let bad = CbfHyper {
            eps_plus: 0.2,
            ..CbfHyper::default()
        };
        assert!(bad.validate().is_err());
        let bad = CbfHyper {
            lambda2: 3.0,
            ..CbfHyper::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny_cbf(seed: u64) -> LipschitzCbf {
        let mut rng = RandomStream::new(seed, 0);
        LipschitzCbf::new(
            EnvKind::DoubleIntegrator,
            &CbfArch {
                hidden: vec![6, 5],
                ..CbfArch::default()
            },
            &mut rng,
        )
    }

    #[test]
    fn hinge_arithmetic() {
        // Zero network: h = 0 everywhere.
        let mut cbf = tiny_cbf(1);
        for l in &mut cbf.net.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        // Final bias makes h = tanh(b) = 0.1.
        cbf.net.layers.last_mut().unwrap().bias[0] = 0.1f64.atanh();
        let plus = Array2::zeros((2, 4));
        let empty = Array2::zeros((0, 4));
        let no_fea = FeaBatch {
            states: empty.clone(),
            means: vec![],
            std_traces: vec![],
        };
        let hyp = CbfHyper {
            eps_plus: 0.2,
            eps_minus: 0.3,
            ..CbfHyper::default()
        };
        let (l, _) = cbf_loss(&cbf, &plus, &empty, &no_fea, &hyp);
        assert!((l.plus - 0.1).abs() < 1e-12);
        cbf.net.layers.last_mut().unwrap().bias[0] = (-0.5f64).atanh();
        let (l, _) = cbf_loss(&cbf, &empty, &plus, &no_fea, &CbfHyper::default());
        assert_eq!(l.minus, 0.0);
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let cbf = tiny_cbf(2);
        let mut rng = RandomStream::new(3, 0);
        let mut r = |n: usize| Array2::from_shape_fn((n, 4), |_| rng.normal());
        let plus = r(5);
        let minus = r(4);
        let fea_states = r(3);
        let means = vec![r(3), r(3)];
        let fea = FeaBatch {
            states: fea_states,
            means,
            std_traces: vec![Array1::from(vec![0.1, 0.2, 0.05]), Array1::from(vec![0.3, 0.0, 0.1])],
        };
        // Large margins keep every hinge active.
        let hyp = CbfHyper {
            eps_plus: 1.5,
            eps_minus: 1.6,
            eps_fea: 2.5,
            ..CbfHyper::default()
        };
        let (l, g) = cbf_loss(&cbf, &plus, &minus, &fea, &hyp);
        assert!(l.plus > 0.0 && l.minus > 0.0 && l.fea > 0.0);
        let fd = finite_diff_grad(
            |p| {
                let mut c = cbf.clone();
                c.net.set_flat(p);
                cbf_loss(&c, &plus, &minus, &fea, &hyp).0.total
            },
            &cbf.net.flatten(),
            1e-6,
        );
        for (a, b) in g.flatten().iter().zip(&fd) {
            let scale = a.abs().max(b.abs()).max(1e-4);
            assert!((a - b).abs() / scale < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn bootstrap_is_seeded() {
        let a = bootstrap_indices(50, &mut RandomStream::new(1, 0).derive(0));
        let b = bootstrap_indices(50, &mut RandomStream::new(1, 0).derive(0));
        let c = bootstrap_indices(50, &mut RandomStream::new(1, 0).derive(1));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
