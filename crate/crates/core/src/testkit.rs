//! Shared test oracles: numeric gradients, a small exact spectral norm,
//! Monte-Carlo helpers and hand-built toy worlds with analytic ground truth.

use ndarray::Array2;

pub use crate::bounds::mean_stderr;
pub use crate::rng::RandomStream;

use crate::envs::{GoalRegion, Layout};
use crate::geometry::{min_signed_distance, Obstacle, Point, Region};

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + eps;
            let hi = f(&p);
            p[i] = x[i] - eps;
            let lo = f(&p);
            p[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Largest singular value via cyclic Jacobi on `W^T W`. Meant for small
/// matrices (a few dozen columns at most).
pub fn exact_spectral_norm(w: &Array2<f64>) -> f64 {
    let mut a = w.t().dot(w);
    let n = a.nrows();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).fold(0.0, f64::max).sqrt()
}

/// Planar world with an analytic distance field.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld {
    pub layout: Layout,
    pub robot_radius: f64,
}

impl ToyWorld {
    /// One disc of radius 0.5 centred at (1.5, 0); the spawn box keeps 0.2 m of
    /// clearance.
    pub fn single_circle() -> Self {
        Self::new(
            "toy-circle",
            vec![Obstacle::Circle {
                center: [1.5, 0.0],
                radius: 0.5,
            }],
            Region {
                min: [-1.0, -1.0],
                max: [0.8, 1.0],
            },
            vec![GoalRegion {
                center: [3.0, 0.0],
                radius: 0.25,
            }],
        )
    }

    /// Horizontal corridor `|y| < 0.6` bounded by two long walls.
    pub fn corridor() -> Self {
        Self::new(
            "toy-corridor",
            vec![
                Obstacle::Rect {
                    min: [-4.0, 0.6],
                    max: [4.0, 1.0],
                },
                Obstacle::Rect {
                    min: [-4.0, -1.0],
                    max: [4.0, -0.6],
                },
            ],
            Region {
                min: [-2.0, -0.3],
                max: [2.0, 0.3],
            },
            vec![GoalRegion {
                center: [3.0, 0.0],
                radius: 0.25,
            }],
        )
    }

    fn new(name: &str, obstacles: Vec<Obstacle>, spawn: Region, goals: Vec<GoalRegion>) -> Self {
        Self {
            layout: Layout {
                name: name.into(),
                spawn,
                obstacles,
                goals,
            },
            robot_radius: 0.1,
        }
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.layout.obstacles
    }

    /// Signed distance from the robot centre to the nearest obstacle.
    pub fn signed_distance(&self, p: Point) -> f64 {
        min_signed_distance(self.obstacles(), p)
    }

    /// Ground truth: the robot body touches an obstacle.
    pub fn is_unsafe(&self, p: Point) -> bool {
        self.signed_distance(p) <= self.robot_radius
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn finite_differences_of_known_functions() {
        let g = finite_diff_grad(|x| x[0] * x[0] + x[1] * x[1], &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let z = finite_diff_grad(|_| 3.0, &[0.5, -0.5, 2.0], 1e-5);
        assert!(z.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn spectral_norm_examples() {
        let eye = Array2::<f64>::eye(3);
        assert!((exact_spectral_norm(&eye) - 1.0).abs() < 1e-12);
        assert!((exact_spectral_norm(&array![[3.0, 0.0], [0.0, 1.0]]) - 3.0).abs() < 1e-12);
        // Rank-one outer product: norm is the product of the vector norms.
        let w = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let expect = (14.0f64).sqrt() * (5.0f64).sqrt() / 5.0f64.sqrt() * 5.0f64.sqrt();
        assert!((exact_spectral_norm(&w) - expect).abs() < 1e-9);
    }

    #[test]
    fn toy_world_distance_is_one_lipschitz() {
        let mut rng = RandomStream::new(10, 0);
        for world in [ToyWorld::single_circle(), ToyWorld::corridor()] {
            for _ in 0..5000 {
                let a = [3.0 * rng.normal(), 3.0 * rng.normal()];
                let b = [a[0] + rng.normal(), a[1] + rng.normal()];
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert!((world.signed_distance(a) - world.signed_distance(b)).abs() <= d + 1e-12);
            }
            assert!(world.layout.validate().is_ok());
        }
        let w = ToyWorld::single_circle();
        assert!(w.is_unsafe([1.5, 0.0]));
        assert!(w.is_unsafe([0.9, 0.0]));
        assert!(!w.is_unsafe([0.0, 0.0]));
    }
}
