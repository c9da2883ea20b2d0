//! Probabilistic networks (Gaussian heads with diagonal covariance) and the
//! bootstrapped ensemble used as the learned dynamics + reward model.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::features::{model_input_dim, push_model_input};
use super::{sigmoid, softplus, Activation, DenseNet, Grads};
use crate::envs::{EnvKind, TaskContext, ACTION_DIM};
use crate::error::{Error, Result};
use crate::model::{DynamicsModel, ModelPrediction};
use crate::rng::RandomStream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension affine standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: ArrayView2<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let mean = rows.sum_axis(Axis(0)) / n;
        let std = rows
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, m)| {
                let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                var.sqrt().max(STD_FLOOR)
            })
            .collect();
        Self {
            mean: mean.to_vec(),
            std,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnnOutput {
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
}

impl PnnOutput {
    pub fn variance(&self) -> Array2<f64> {
        self.log_var.mapv(f64::exp)
    }
}

/// Smoothly squash `raw` into `[lo, hi]`; returns the value and d value/d raw.
#[inline]
pub fn soft_clamp(raw: f64, lo: f64, hi: f64) -> (f64, f64) {
    let upper = hi - softplus(hi - raw);
    let d_upper = sigmoid(hi - raw);
    let v = lo + softplus(upper - lo);
    let d_v = sigmoid(upper - lo);
    (v.clamp(lo, hi), d_upper * d_v)
}

/// Diagonal-Gaussian negative log likelihood averaged over the batch,
/// with its gradients with respect to the mean and log-variance.
pub fn gaussian_nll(out: &PnnOutput, target: ArrayView2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let b = out.mean.nrows() as f64;
    let mut loss = 0.0;
    let mut d_mean = Array2::zeros(out.mean.raw_dim());
    let mut d_lv = Array2::zeros(out.mean.raw_dim());
    ndarray::Zip::from(&mut d_mean)
        .and(&mut d_lv)
        .and(&out.mean)
        .and(&out.log_var)
        .and(target)
        .for_each(|dm, dl, &m, &lv, &t| {
            let inv = (-lv).exp();
            let r = t - m;
            loss += 0.5 * (r * r * inv + lv + LN_2PI);
            *dm = -r * inv / b;
            *dl = 0.5 * (1.0 - r * r * inv) / b;
        });
    (loss / b, d_mean, d_lv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PnnArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub logvar_min: f64,
    pub logvar_max: f64,
}

impl Default for PnnArch {
    fn default() -> Self {
        Self {
            hidden: vec![200, 200, 200],
            activation: Activation::Swish,
            logvar_min: -10.0,
            logvar_max: 0.5,
        }
    }
}

/// One probabilistic network: the last layer emits `[mean | raw log-var]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pnn {
    pub net: DenseNet,
    pub logvar_min: f64,
    pub logvar_max: f64,
}

impl Pnn {
    pub fn new(input_dim: usize, out_dim: usize, arch: &PnnArch, rng: &mut RandomStream) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend(&arch.hidden);
        sizes.push(2 * out_dim);
        Self {
            net: DenseNet::new(&sizes, arch.activation, Activation::Identity, rng),
            logvar_min: arch.logvar_min,
            logvar_max: arch.logvar_max,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    fn split(&self, raw: &Array2<f64>) -> (PnnOutput, Array2<f64>) {
        let d = self.out_dim();
        let mean = raw.slice(s![.., ..d]).to_owned();
        let mut log_var = raw.slice(s![.., d..]).to_owned();
        let mut dclamp = Array2::zeros(log_var.raw_dim());
        ndarray::Zip::from(&mut log_var).and(&mut dclamp).for_each(|lv, dc| {
            let (v, d) = soft_clamp(*lv, self.logvar_min, self.logvar_max);
            *lv = v;
            *dc = d;
        });
        (PnnOutput { mean, log_var }, dclamp)
    }

    /// Forward pass on already-normalized inputs.
    pub fn forward(&self, x: ArrayView2<f64>) -> PnnOutput {
        self.split(&self.net.forward(x)).0
    }

    /// Forward pass that rejects non-finite outputs.
    pub fn forward_checked(&self, x: ArrayView2<f64>) -> Result<PnnOutput> {
        let out = self.forward(x);
        if out.mean.iter().chain(out.log_var.iter()).all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite("pnn forward"))
        }
    }

    /// Mean NLL on a batch and its parameter gradients.
    pub fn nll_and_grads(&self, x: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Grads) {
        let tape = self.net.forward_tape(x);
        let (out, dclamp) = self.split(&tape.output);
        let (loss, d_mean, d_lv) = gaussian_nll(&out, target);
        let d = self.out_dim();
        let mut d_raw = Array2::zeros(tape.output.raw_dim());
        d_raw.slice_mut(s![.., ..d]).assign(&d_mean);
        d_raw.slice_mut(s![.., d..]).assign(&(d_lv * dclamp));
        (loss, self.net.backward(&tape, d_raw.view()))
    }

    pub fn nll(&self, x: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
        gaussian_nll(&self.forward(x), target).0
    }
}

/// Ensemble of bootstrapped PNNs predicting `(next_state - state, reward)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PnnEnsemble {
    pub kind: EnvKind,
    pub goal_features: bool,
    pub members: Vec<Pnn>,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
}

impl PnnEnsemble {
    pub fn new(kind: EnvKind, goal_features: bool, size: usize, arch: &PnnArch, rng: &mut RandomStream) -> Self {
        let in_dim = model_input_dim(kind, goal_features, ACTION_DIM);
        let out_dim = kind.state_dim() + 1;
        let members = (0..size)
            .map(|e| Pnn::new(in_dim, out_dim, arch, &mut rng.derive(e as u64)))
            .collect();
        Self {
            kind,
            goal_features,
            members,
            input_norm: Normalizer::identity(in_dim),
            target_norm: Normalizer::identity(out_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_norm.dim()
    }

    pub fn target_dim(&self) -> usize {
        self.target_norm.dim()
    }

    /// Un-normalized model inputs, one row per query.
    pub fn raw_inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>, ctx: &TaskContext) -> Array2<f64> {
        let dim = self.input_dim();
        let mut flat = Vec::with_capacity(states.nrows() * dim);
        for (s, a) in states.rows().into_iter().zip(actions.rows()) {
            match (s.as_slice(), a.as_slice()) {
                (Some(s), Some(a)) => push_model_input(self.kind, self.goal_features, s, a, ctx, &mut flat),
                _ => push_model_input(self.kind, self.goal_features, &s.to_vec(), &a.to_vec(), ctx, &mut flat),
            }
        }
        Array2::from_shape_vec((states.nrows(), dim), flat).expect("shape")
    }

    pub fn inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>, ctx: &TaskContext) -> Array2<f64> {
        let mut x = self.raw_inputs(states, actions, ctx);
        self.input_norm.normalize(&mut x);
        x
    }

    /// Un-normalized targets `(s' - s, r)`.
    pub fn raw_targets(states: ArrayView2<f64>, next: ArrayView2<f64>, rewards: &[f64]) -> Array2<f64> {
        let n = states.ncols();
        let mut t = Array2::zeros((states.nrows(), n + 1));
        t.slice_mut(s![.., ..n]).assign(&(&next - &states));
        for (i, r) in rewards.iter().enumerate() {
            t[[i, n]] = *r;
        }
        t
    }

    /// Member output mapped back to raw target units: (mean, variance).
    pub fn member_output(&self, member: usize, x_norm: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let out = self.members[member].forward(x_norm);
        let mut mean = out.mean;
        let mut var = out.log_var.mapv(super::exp);
        for (mut m_row, mut v_row) in mean.rows_mut().into_iter().zip(var.rows_mut()) {
            for (j, (m, v)) in m_row.iter_mut().zip(v_row.iter_mut()).enumerate() {
                let sd = self.target_norm.std[j];
                *m = *m * sd + self.target_norm.mean[j];
                *v *= sd * sd;
            }
        }
        (mean, var)
    }
}

impl DynamicsModel for PnnEnsemble {
    fn kind(&self) -> EnvKind {
        self.kind
    }

    fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    fn predict(&self, member: usize, states: ArrayView2<f64>, actions: ArrayView2<f64>, ctx: &TaskContext) -> ModelPrediction {
        let x = self.inputs(states, actions, ctx);
        let (mean, var) = self.member_output(member, x.view());
        let n = self.kind.state_dim();
        let next_mean = &states + &mean.slice(s![.., ..n]);
        ModelPrediction {
            next_mean,
            next_var: var.slice(s![.., ..n]).to_owned(),
            reward_mean: mean.column(n).to_owned(),
            reward_var: var.column(n).to_owned(),
        }
    }
}

/// Trace of the state block of each row's diagonal covariance.
pub fn state_trace(var: ArrayView2<f64>) -> Array1<f64> {
    var.sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::finite_diff_grad;

    #[test]
    fn nll_examples() {
        let half_ln_2pi = 0.5 * LN_2PI;
        let out = PnnOutput {
            mean: Array2::from_elem((1, 3), 0.4),
            log_var: Array2::from_elem((1, 3), -LN_2PI),
        };
        let t = Array2::from_elem((1, 3), 0.4);
        assert!(gaussian_nll(&out, t.view()).0.abs() < 1e-12);
        let out1 = PnnOutput {
            mean: Array2::from_elem((1, 1), 0.4),
            log_var: Array2::zeros((1, 1)),
        };
        let t1 = Array2::from_elem((1, 1), 0.4);
        assert!((gaussian_nll(&out1, t1.view()).0 - half_ln_2pi).abs() < 1e-12);
    }

    #[test]
    fn soft_clamp_stays_in_bounds() {
        for raw in [-1e6, -50.0, -10.0, -3.0, 0.0, 0.5, 3.0, 1e6] {
            let (v, d) = soft_clamp(raw, -10.0, 0.5);
            assert!((-10.0..=0.5).contains(&v));
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn fresh_network_output_is_bounded() {
        let mut rng = RandomStream::new(1, 0);
        let pnn = Pnn::new(5, 4, &PnnArch::default(), &mut rng);
        let x = Array2::from_shape_fn((32, 5), |_| 3.0 * rng.normal());
        let out = pnn.forward_checked(x.view()).unwrap();
        let var = out.variance();
        assert!(var.iter().all(|&v| v >= (-10.0f64).exp() && v <= 0.5f64.exp()));
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = RandomStream::new(2, 0);
        let arch = PnnArch {
            hidden: vec![6, 5],
            ..PnnArch::default()
        };
        let pnn = Pnn::new(3, 2, &arch, &mut rng);
        let x = Array2::from_shape_fn((7, 3), |_| rng.normal());
        let t = Array2::from_shape_fn((7, 2), |_| rng.normal());
        let (_, g) = pnn.nll_and_grads(x.view(), t.view());
        let fd = finite_diff_grad(
            |p| {
                let mut q = pnn.clone();
                q.net.set_flat(p);
                q.nll(x.view(), t.view())
            },
            &pnn.net.flatten(),
            1e-6,
        );
        for (a, b) in g.flatten().iter().zip(&fd) {
            let scale = a.abs().max(b.abs()).max(1e-4);
            assert!((a - b).abs() / scale < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn normalizer_floors_std() {
        let rows = Array2::from_shape_vec((3, 2), vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0]).unwrap();
        let n = Normalizer::fit(rows.view());
        assert_eq!(n.std[0], STD_FLOOR);
        assert!((n.mean[1] - 6.0).abs() < 1e-12);
    }
}
