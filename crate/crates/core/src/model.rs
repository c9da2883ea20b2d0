//! Interfaces between learned (or oracle) components and the planner.

use ndarray::{Array1, Array2, ArrayView2};

use crate::envs::{EnvKind, TaskContext};

/// Batched one-step prediction of a single ensemble member: Gaussian next
/// state (diagonal covariance) and Gaussian reward.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPrediction {
    pub next_mean: Array2<f64>,
    pub next_var: Array2<f64>,
    pub reward_mean: Array1<f64>,
    pub reward_var: Array1<f64>,
}

pub trait DynamicsModel: Sync {
    fn kind(&self) -> EnvKind;

    fn ensemble_size(&self) -> usize;

    /// Rows of `states`/`actions` are individual queries.
    fn predict(&self, member: usize, states: ArrayView2<f64>, actions: ArrayView2<f64>, ctx: &TaskContext) -> ModelPrediction;
}

/// A scalar barrier function with a known global Lipschitz constant.
pub trait Barrier: Sync {
    fn lipschitz(&self) -> f64;

    fn values(&self, states: ArrayView2<f64>) -> Array1<f64>;

    fn value(&self, state: &[f64]) -> f64 {
        let row = ArrayView2::from_shape((1, state.len()), state).expect("row");
        self.values(row)[0]
    }
}

/// Barrier that is the same constant everywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantBarrier {
    pub value: f64,
    pub lipschitz: f64,
}

impl Barrier for ConstantBarrier {
    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn values(&self, states: ArrayView2<f64>) -> Array1<f64> {
        Array1::from_elem(states.nrows(), self.value)
    }
}

/// Binary unsafe-state predictor (the penalty baseline's classifier).
pub trait SafetyPredictor: Sync {
    fn predict_unsafe(&self, states: ArrayView2<f64>) -> Vec<bool>;
}

impl SafetyPredictor for crate::neural::SafetyClassifier {
    fn predict_unsafe(&self, states: ArrayView2<f64>) -> Vec<bool> {
        crate::neural::SafetyClassifier::predict_unsafe(self, states)
    }
}

/// Predictor that never flags a state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeverUnsafe;

impl SafetyPredictor for NeverUnsafe {
    fn predict_unsafe(&self, states: ArrayView2<f64>) -> Vec<bool> {
        vec![false; states.nrows()]
    }
}
