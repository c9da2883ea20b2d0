//! Simulated 36-beam LiDAR safety sensor.
//!
//! The sensor casts beams from the robot, turns hits into a world-frame point
//! cloud, samples candidate states around the robot and labels each one by
//! checking its collision body against the cloud. For the double integrator
//! the body is inflated by the braking distance of the velocity component
//! approaching each point.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, EnvParams, State};
use crate::geometry::{Obstacle, Point};

pub const BEAMS: usize = 36;
pub const MAX_RANGE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LidarScan {
    pub origin: Point,
    pub angles: Vec<f64>,
    pub ranges: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyLabel {
    Safe,
    Unsafe,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SafetyLabelBatch {
    pub states: Vec<State>,
    pub labels: Vec<SafetyLabel>,
}

impl SafetyLabelBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn count(&self, label: SafetyLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub grid_spacing: f64,
    pub sensing_radius: f64,
    /// Speeds of the eight compass-direction velocity variants (double
    /// integrator only).
    pub probe_speeds: Vec<f64>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            grid_spacing: 0.1,
            sensing_radius: MAX_RANGE,
            probe_speeds: vec![0.75, 1.5],
        }
    }
}

pub fn beam_angles() -> Vec<f64> {
    (0..BEAMS).map(|j| 2.0 * PI * j as f64 / BEAMS as f64).collect()
}

pub fn raycast(position: Point, obstacles: &[Obstacle]) -> LidarScan {
    let angles = beam_angles();
    let ranges = angles
        .iter()
        .map(|&a| {
            let dir = [a.cos(), a.sin()];
            obstacles
                .iter()
                .filter_map(|o| o.ray_hit(position, dir))
                .fold(MAX_RANGE, f64::min)
        })
        .collect();
    LidarScan {
        origin: position,
        angles,
        ranges,
    }
}

/// World-frame hit points; max-range beams produce none.
pub fn scan_to_points(scan: &LidarScan) -> Vec<Point> {
    scan.angles
        .iter()
        .zip(&scan.ranges)
        .filter(|(_, &r)| r < MAX_RANGE)
        .map(|(&a, &r)| [scan.origin[0] + r * a.cos(), scan.origin[1] + r * a.sin()])
        .collect()
}

fn grid_offsets(cfg: &SensorConfig) -> Vec<Point> {
    let n = (cfg.sensing_radius / cfg.grid_spacing).floor() as i64;
    let r2 = cfg.sensing_radius * cfg.sensing_radius;
    let mut out = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            let off = [i as f64 * cfg.grid_spacing, j as f64 * cfg.grid_spacing];
            if (i, j) != (0, 0) && off[0] * off[0] + off[1] * off[1] <= r2 {
                out.push(off);
            }
        }
    }
    out
}

/// Candidate states inside the sensing disc. The current state comes first;
/// other grid positions are kept only if some hit point lies within the
/// sensing radius. Remaining state components are copied from `current`,
/// except for the double integrator, which crosses positions with a velocity
/// set: current, zero, and eight compass directions per probe speed.
pub fn sample_candidate_states(
    current: &[f64],
    kind: EnvKind,
    points: &[Point],
    cfg: &SensorConfig,
) -> Vec<State> {
    let r2 = cfg.sensing_radius * cfg.sensing_radius;
    let mut positions = vec![[current[0], current[1]]];
    for off in grid_offsets(cfg) {
        let p = [current[0] + off[0], current[1] + off[1]];
        let near = points.iter().any(|q| {
            let dx = q[0] - p[0];
            let dy = q[1] - p[1];
            dx * dx + dy * dy <= r2
        });
        if near {
            positions.push(p);
        }
    }
    let mut out = Vec::new();
    match kind {
        EnvKind::DoubleIntegrator => {
            let mut velocities = vec![[current[2], current[3]], [0.0, 0.0]];
            for &speed in &cfg.probe_speeds {
                for k in 0..8 {
                    let a = k as f64 * PI / 4.0;
                    velocities.push([speed * a.cos(), speed * a.sin()]);
                }
            }
            for p in &positions {
                for v in &velocities {
                    out.push(vec![p[0], p[1], v[0], v[1]]);
                }
            }
        }
        _ => {
            for p in &positions {
                let mut s = current.to_vec();
                s[0] = p[0];
                s[1] = p[1];
                out.push(s);
            }
        }
    }
    out
}

/// Static check: unsafe iff some hit point lies within `radius`.
pub fn label_first_order(points: &[Point], candidates: &[State], radius: f64) -> SafetyLabelBatch {
    let r2 = radius * radius;
    let labels = candidates
        .iter()
        .map(|s| {
            let hit = points.iter().any(|q| {
                let dx = q[0] - s[0];
                let dy = q[1] - s[1];
                dx * dx + dy * dy <= r2
            });
            if hit {
                SafetyLabel::Unsafe
            } else {
                SafetyLabel::Safe
            }
        })
        .collect();
    SafetyLabelBatch {
        states: candidates.to_vec(),
        labels,
    }
}

/// Velocity-aware check: the body radius toward each point grows by the
/// braking distance `v_app^2 / (2 a_max)` of the approaching speed `v_app`.
pub fn label_double_integrator(points: &[Point], candidates: &[State], radius: f64, a_max: f64) -> SafetyLabelBatch {
    let labels = candidates
        .iter()
        .map(|s| {
            let hit = points.iter().any(|q| {
                let dx = q[0] - s[0];
                let dy = q[1] - s[1];
                let d = dx.hypot(dy);
                if d <= radius {
                    return true;
                }
                let v_app = ((s[2] * dx + s[3] * dy) / d).max(0.0);
                d <= radius + v_app * v_app / (2.0 * a_max)
            });
            if hit {
                SafetyLabel::Unsafe
            } else {
                SafetyLabel::Safe
            }
        })
        .collect();
    SafetyLabelBatch {
        states: candidates.to_vec(),
        labels,
    }
}

/// Full sensing pass at `state`.
pub fn sense(
    state: &[f64],
    kind: EnvKind,
    params: &EnvParams,
    obstacles: &[Obstacle],
    cfg: &SensorConfig,
) -> SafetyLabelBatch {
    let scan = raycast([state[0], state[1]], obstacles);
    let points = scan_to_points(&scan);
    let candidates = sample_candidate_states(state, kind, &points, cfg);
    match kind {
        EnvKind::DoubleIntegrator => label_double_integrator(&points, &candidates, params.robot_radius, params.a_max),
        _ => label_first_order(&points, &candidates, params.robot_radius),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wall_ahead() -> Vec<Obstacle> {
        vec![Obstacle::Rect {
            min: [2.0, -1.0],
            max: [2.5, 1.0],
        }]
    }

    #[test]
    fn raycast_examples() {
        let scan = raycast([0.0, 0.0], &wall_ahead());
        assert_eq!(scan.ranges.len(), BEAMS);
        assert!((scan.ranges[0] - 2.0).abs() < 1e-12);
        let empty = raycast([0.0, 0.0], &[]);
        assert!(empty.ranges.iter().all(|&r| r == MAX_RANGE));
        let adjacent = raycast([1.93, 0.0], &wall_ahead());
        assert!((adjacent.ranges[0] - 0.07).abs() < 1e-12);
    }

    #[test]
    fn points_from_scan() {
        let scan = LidarScan {
            origin: [0.0, 0.0],
            angles: beam_angles(),
            ranges: {
                let mut r = vec![MAX_RANGE; BEAMS];
                r[0] = 2.0;
                r
            },
        };
        assert_eq!(scan_to_points(&scan), vec![[2.0, 0.0]]);
        let all = LidarScan {
            ranges: vec![1.0; BEAMS],
            ..scan.clone()
        };
        assert_eq!(scan_to_points(&all).len(), BEAMS);
        let none = LidarScan {
            ranges: vec![MAX_RANGE; BEAMS],
            ..scan
        };
        assert!(scan_to_points(&none).is_empty());
    }

    #[test]
    fn candidate_counts() {
        let cfg = SensorConfig::default();
        let grid = grid_offsets(&cfg).len() + 1;
        // Lattice points of a radius-50 disc.
        assert!((grid as f64 - std::f64::consts::PI * 2500.0).abs() < 100.0, "{grid}");
        // A point at the origin is within 5 m of every grid position.
        let pts = [[0.0, 0.0]];
        let uni = sample_candidate_states(&[0.0, 0.0, 0.3], EnvKind::Unicycle, &pts, &cfg);
        assert_eq!(uni.len(), grid);
        assert_eq!(uni[0], vec![0.0, 0.0, 0.3]);
        assert!(uni.iter().all(|s| s[2] == 0.3));
        let di = sample_candidate_states(&[0.0, 0.0, 0.2, 0.1], EnvKind::DoubleIntegrator, &pts, &cfg);
        assert_eq!(di.len(), grid * 18);
        assert_eq!(di[0], vec![0.0, 0.0, 0.2, 0.1]);
        // Without points only the current state survives.
        let lone = sample_candidate_states(&[0.0, 0.0, 0.3], EnvKind::Unicycle, &[], &cfg);
        assert_eq!(lone.len(), 1);
    }

    #[test]
    fn first_order_labels() {
        let pts = [[0.05, 0.0]];
        let cands = vec![vec![0.0, 0.0, 0.0], vec![2.0, 2.0, 0.0]];
        let b = label_first_order(&pts, &cands, 0.1);
        assert_eq!(b.labels, vec![SafetyLabel::Unsafe, SafetyLabel::Safe]);
        let e = label_first_order(&[], &cands, 0.1);
        assert!(e.labels.iter().all(|&l| l == SafetyLabel::Safe));
    }

    #[test]
    fn double_integrator_labels() {
        let pts = [[0.3, 0.0]];
        // Moving away: plain radius check.
        let away = label_double_integrator(&pts, &[vec![0.0, 0.0, -1.5, 0.0]], 0.1, 3.0);
        assert_eq!(away.labels, vec![SafetyLabel::Safe]);
        // Approaching at 1.5 m/s inflates by 0.375 m.
        let toward = label_double_integrator(&pts, &[vec![0.0, 0.0, 1.5, 0.0]], 0.1, 3.0);
        assert_eq!(toward.labels, vec![SafetyLabel::Unsafe]);
        let edge = label_double_integrator(&[[0.474, 0.0]], &[vec![0.0, 0.0, 1.5, 0.0]], 0.1, 3.0);
        assert_eq!(edge.labels, vec![SafetyLabel::Unsafe]);
        let beyond = label_double_integrator(&[[0.476, 0.0]], &[vec![0.0, 0.0, 1.5, 0.0]], 0.1, 3.0);
        assert_eq!(beyond.labels, vec![SafetyLabel::Safe]);
    }

    #[test]
    fn sensing_is_deterministic() {
        let kind = EnvKind::Unicycle;
        let p = EnvParams::for_kind(kind);
        let a = sense(&[0.0, 0.0, 0.0], kind, &p, &wall_ahead(), &SensorConfig::default());
        let b = sense(&[0.0, 0.0, 0.0], kind, &p, &wall_ahead(), &SensorConfig::default());
        assert_eq!(a, b);
        assert!(a.count(SafetyLabel::Unsafe) > 0);
    }
}
