//! Binary safety classifier used by the penalty-based baseline.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::features::{push_state_features, state_feature_dim};
use super::{sigmoid, softplus, Activation, DenseNet, Grads};
use crate::envs::EnvKind;
use crate::rng::RandomStream;

pub const UNSAFE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierArch {
    pub hidden: Vec<usize>,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

/// Network emitting a logit for "unsafe"; probabilities come from a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyClassifier {
    pub kind: EnvKind,
    pub net: DenseNet,
}

/// Mean binary cross-entropy on logits, with `dL/dlogit`. Labels: 1 = unsafe.
pub fn bce_with_logits(logits: ArrayView1<f64>, labels: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let b = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = ndarray::Zip::from(&logits).and(&labels).map_collect(|&z, &y| {
        loss += softplus(z) - y * z;
        (sigmoid(z) - y) / b
    });
    (loss / b, grad)
}

impl SafetyClassifier {
    pub fn new(kind: EnvKind, arch: &ClassifierArch, rng: &mut RandomStream) -> Self {
        let mut sizes = vec![state_feature_dim(kind)];
        sizes.extend(&arch.hidden);
        sizes.push(1);
        Self {
            kind,
            net: DenseNet::new(&sizes, Activation::Swish, Activation::Identity, rng),
        }
    }

    pub fn features(&self, states: ArrayView2<f64>) -> Array2<f64> {
        let dim = state_feature_dim(self.kind);
        let mut flat = Vec::with_capacity(states.nrows() * dim);
        for row in states.rows() {
            push_state_features(self.kind, &row.to_vec(), &mut flat);
        }
        Array2::from_shape_vec((states.nrows(), dim), flat).expect("shape")
    }

    pub fn logits(&self, states: ArrayView2<f64>) -> Array1<f64> {
        self.net.forward(self.features(states).view()).column(0).to_owned()
    }

    /// Probability of being unsafe.
    pub fn probabilities(&self, states: ArrayView2<f64>) -> Array1<f64> {
        self.logits(states).mapv(sigmoid)
    }

    /// Unsafe iff the probability strictly exceeds the threshold.
    pub fn predict_unsafe(&self, states: ArrayView2<f64>) -> Vec<bool> {
        self.probabilities(states).iter().map(|&p| p > UNSAFE_THRESHOLD).collect()
    }

    pub fn loss_and_grads(&self, states: ArrayView2<f64>, labels: ArrayView1<f64>) -> (f64, Grads) {
        let tape = self.net.forward_tape(self.features(states).view());
        let (loss, d) = bce_with_logits(tape.output.column(0), labels);
        let d_out = d.insert_axis(ndarray::Axis(1));
        (loss, self.net.backward(&tape, d_out.view()))
    }

    pub fn loss(&self, states: ArrayView2<f64>, labels: ArrayView1<f64>) -> f64 {
        bce_with_logits(self.logits(states).view(), labels).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::finite_diff_grad;

    #[test]
    fn untrained_probabilities_in_open_interval() {
        let mut rng = RandomStream::new(5, 0);
        let c = SafetyClassifier::new(EnvKind::DoubleIntegrator, &ClassifierArch::default(), &mut rng);
        let x = Array2::from_shape_fn((50, 4), |_| 3.0 * rng.normal());
        assert!(c.probabilities(x.view()).iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn threshold_tie_is_safe() {
        let mut rng = RandomStream::new(5, 1);
        let mut c = SafetyClassifier::new(EnvKind::DoubleIntegrator, &ClassifierArch { hidden: vec![3] }, &mut rng);
        for l in &mut c.net.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let x = Array2::zeros((1, 4));
        assert_eq!(c.predict_unsafe(x.view()), vec![false]);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = RandomStream::new(6, 0);
        let c = SafetyClassifier::new(EnvKind::Unicycle, &ClassifierArch { hidden: vec![5, 4] }, &mut rng);
        let x = Array2::from_shape_fn((9, 3), |_| rng.normal());
        let y = Array1::from_shape_fn(9, |i| (i % 2) as f64);
        let (_, g) = c.loss_and_grads(x.view(), y.view());
        let fd = finite_diff_grad(
            |p| {
                let mut q = c.clone();
                q.net.set_flat(p);
                q.loss(x.view(), y.view())
            },
            &c.net.flatten(),
            1e-6,
        );
        for (a, b) in g.flatten().iter().zip(&fd) {
            let scale = a.abs().max(b.abs()).max(1e-4);
            assert!((a - b).abs() / scale < 1e-4);
        }
    }
}
