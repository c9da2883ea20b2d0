//! State featurization shared by the networks.
//!
//! Headings are replaced by `(sin, cos)`. The chord length never exceeds the
//! arc length, so the map is 1-Lipschitz in the state and composing it with a
//! certified network keeps the certificate.

use crate::envs::{augment_goal_features, EnvKind, TaskContext};

pub fn state_feature_dim(kind: EnvKind) -> usize {
    match kind.heading_index() {
        Some(_) => kind.state_dim() + 1,
        None => kind.state_dim(),
    }
}

pub fn push_state_features(kind: EnvKind, s: &[f64], out: &mut Vec<f64>) {
    match kind.heading_index() {
        Some(h) => {
            for (i, &v) in s.iter().enumerate() {
                if i == h {
                    let (sn, cs) = v.sin_cos();
                    out.push(sn);
                    out.push(cs);
                } else {
                    out.push(v);
                }
            }
        }
        None => out.extend_from_slice(s),
    }
}

pub fn model_input_dim(kind: EnvKind, goal_features: bool, action_dim: usize) -> usize {
    state_feature_dim(kind) + if goal_features { 3 } else { 0 } + action_dim
}

/// Dynamics-model input: state features, goal features (if used), action.
pub fn push_model_input(
    kind: EnvKind,
    goal_features: bool,
    s: &[f64],
    a: &[f64],
    ctx: &TaskContext,
    out: &mut Vec<f64>,
) {
    push_state_features(kind, s, out);
    if goal_features {
        let g = ctx.goal.unwrap_or([s[0], s[1]]);
        out.extend_from_slice(&augment_goal_features(kind, s, g));
    }
    out.extend(a.iter().map(|v| v.clamp(-1.0, 1.0)));
}
