//! Barrier network with a certified global Lipschitz bound.
//!
//! Each weight matrix is projected onto the spectral-norm ball of radius
//! `L_h^(1/n)` after every optimizer step. The hidden and final activations
//! are tanh (1-Lipschitz), so the product of the layer certificates bounds the
//! slope of the whole map. The output lies in (-1, 1).

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::features::{push_state_features, state_feature_dim};
use super::{Activation, DenseNet};
use crate::envs::EnvKind;
use crate::model::Barrier;
use crate::rng::RandomStream;

pub const POWER_MIN_ITERS: usize = 20;
pub const POWER_MAX_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbfArch {
    pub hidden: Vec<usize>,
    /// Hidden activation; must be 1-Lipschitz (tanh or relu).
    pub activation: Activation,
    pub lipschitz: f64,
}

impl Default for CbfArch {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            activation: Activation::Tanh,
            lipschitz: 1.0,
        }
    }
}

/// Largest singular value of `w` by power iteration on `w^T w`, warm-started
/// from (and updating) `v`.
pub fn power_iteration(w: &Array2<f64>, v: &mut Array1<f64>) -> f64 {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 && norm.is_finite() {
        *v /= norm;
    } else {
        let fill = 1.0 / (v.len() as f64).sqrt();
        v.fill(fill);
    }
    let mut sigma = 0.0;
    for it in 0..POWER_MAX_ITERS {
        let mut u = w.dot(&*v);
        let un = u.dot(&u).sqrt();
        if un == 0.0 {
            return 0.0;
        }
        u /= un;
        let mut next = w.t().dot(&u);
        let s = next.dot(&next).sqrt();
        if s == 0.0 {
            return 0.0;
        }
        next /= s;
        *v = next;
        let change = (s - sigma).abs() / s;
        sigma = s;
        if it + 1 >= POWER_MIN_ITERS && change < POWER_TOL {
            break;
        }
    }
    sigma
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzCbf {
    pub kind: EnvKind,
    pub net: DenseNet,
    pub lipschitz: f64,
    /// Persistent right-singular-vector estimates, one per layer.
    pub power_vectors: Vec<Array1<f64>>,
    /// Certified operator norm of each layer after the last projection.
    pub certified: Vec<f64>,
}

impl LipschitzCbf {
    pub fn new(kind: EnvKind, arch: &CbfArch, rng: &mut RandomStream) -> Self {
        let mut sizes = vec![state_feature_dim(kind)];
        sizes.extend(&arch.hidden);
        sizes.push(1);
        let net = DenseNet::new(&sizes, arch.activation, Activation::Tanh, rng);
        Self::from_net(kind, net, arch.lipschitz)
    }

    /// Wrap an existing tanh network and project it onto the certified set.
    pub fn from_net(kind: EnvKind, net: DenseNet, lipschitz: f64) -> Self {
        let power_vectors = net
            .layers
            .iter()
            .map(|l| Array1::from_elem(l.n_out(), 1.0 / (l.n_out() as f64).sqrt()))
            .collect();
        let mut cbf = Self {
            kind,
            certified: vec![0.0; net.layers.len()],
            net,
            lipschitz,
            power_vectors,
        };
        cbf.renormalize();
        cbf
    }

    pub fn layer_budget(&self) -> f64 {
        self.lipschitz.powf(1.0 / self.net.layers.len() as f64)
    }

    /// Rescale every layer to `W * min(1, c / sigma(W))`. Subnormal weights
    /// are flushed to zero first; repeated shrinking of unused weights
    /// otherwise drives them there and slows every later forward pass.
    pub fn renormalize(&mut self) {
        let c = self.layer_budget();
        for ((layer, v), cert) in self.net.layers.iter_mut().zip(&mut self.power_vectors).zip(&mut self.certified) {
            layer.weight.mapv_inplace(|w| if w.is_subnormal() { 0.0 } else { w });
            let sigma = power_iteration(&layer.weight, v);
            if sigma > c {
                layer.weight *= c / sigma;
                *cert = c;
            } else {
                *cert = sigma;
            }
        }
    }

    pub fn certified_norms(&self) -> &[f64] {
        &self.certified
    }

    /// Product of layer certificates (activations are 1-Lipschitz).
    pub fn certified_bound(&self) -> f64 {
        self.certified.iter().product()
    }

    pub fn features(&self, states: ArrayView2<f64>) -> Array2<f64> {
        let dim = state_feature_dim(self.kind);
        let mut flat = Vec::with_capacity(states.nrows() * dim);
        for row in states.rows() {
            match row.as_slice() {
                Some(s) => push_state_features(self.kind, s, &mut flat),
                None => push_state_features(self.kind, &row.to_vec(), &mut flat),
            }
        }
        Array2::from_shape_vec((states.nrows(), dim), flat).expect("shape")
    }
}

impl Barrier for LipschitzCbf {
    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn values(&self, states: ArrayView2<f64>) -> Array1<f64> {
        let out = self.net.forward(self.features(states).view());
        out.column(0).to_owned()
    }
}
