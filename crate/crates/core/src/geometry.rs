//! Planar obstacle geometry: distances, signed distances and ray casts.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

#[inline]
fn norm2(x: f64, y: f64) -> f64 {
    (x * x + y * y).sqrt()
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    norm2(a[0] - b[0], a[1] - b[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Obstacle {
    Rect { min: Point, max: Point },
    Circle { center: Point, radius: f64 },
}

impl Obstacle {
    pub fn is_valid(&self) -> bool {
        match self {
            Obstacle::Rect { min, max } => min[0] < max[0] && min[1] < max[1],
            Obstacle::Circle { radius, .. } => *radius > 0.0,
        }
    }

    /// Euclidean signed distance: positive outside, negative inside.
    pub fn signed_distance(&self, p: Point) -> f64 {
        match self {
            Obstacle::Rect { min, max } => {
                let dx = (min[0] - p[0]).max(p[0] - max[0]);
                let dy = (min[1] - p[1]).max(p[1] - max[1]);
                let outside = norm2(dx.max(0.0), dy.max(0.0));
                outside + dx.max(dy).min(0.0)
            }
            Obstacle::Circle { center, radius } => dist(p, *center) - radius,
        }
    }

    /// Distance along the unit ray `origin + t * dir` to the first boundary
    /// crossing, if any. An origin inside the obstacle reports `t = 0`.
    pub fn ray_hit(&self, origin: Point, dir: Point) -> Option<f64> {
        match self {
            Obstacle::Rect { min, max } => {
                let mut t_lo = f64::NEG_INFINITY;
                let mut t_hi = f64::INFINITY;
                for k in 0..2 {
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                    } else {
                        let a = (min[k] - origin[k]) / dir[k];
                        let b = (max[k] - origin[k]) / dir[k];
                        t_lo = t_lo.max(a.min(b));
                        t_hi = t_hi.min(a.max(b));
                    }
                }
                if t_lo <= t_hi && t_hi >= 0.0 {
                    Some(t_lo.max(0.0))
                } else {
                    None
                }
            }
            Obstacle::Circle { center, radius } => {
                let ox = origin[0] - center[0];
                let oy = origin[1] - center[1];
                let b = ox * dir[0] + oy * dir[1];
                let c = ox * ox + oy * oy - radius * radius;
                if c <= 0.0 {
                    return Some(0.0);
                }
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t >= 0.0).then_some(t)
            }
        }
    }
}

/// Minimum signed distance to any obstacle (`+inf` for an empty world).
pub fn min_signed_distance(obstacles: &[Obstacle], p: Point) -> f64 {
    obstacles
        .iter()
        .map(|o| o.signed_distance(p))
        .fold(f64::INFINITY, f64::min)
}

/// Closed-set collision test of a disc of `radius` against every obstacle.
pub fn is_collision(p: Point, obstacles: &[Obstacle], radius: f64) -> bool {
    obstacles.iter().any(|o| o.signed_distance(p) <= radius)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: Point,
    pub max: Point,
}

impl Region {
    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_signed_distance() {
        let r = Obstacle::Rect {
            min: [0.0, 0.0],
            max: [1.0, 2.0],
        };
        assert_eq!(r.signed_distance([2.0, 1.0]), 1.0);
        assert_eq!(r.signed_distance([0.5, 1.0]), -0.5);
        assert!((r.signed_distance([4.0, 6.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn disc_collision() {
        let c = Obstacle::Circle {
            center: [0.15, 0.0],
            radius: 0.1,
        };
        assert!(is_collision([0.0, 0.0], &[c.clone()], 0.1));
        assert!(!is_collision([3.0, 0.0], &[c], 0.1));
    }

    #[test]
    fn touching_counts_as_collision() {
        let r = Obstacle::Rect {
            min: [1.0, -1.0],
            max: [2.0, 1.0],
        };
        assert!(is_collision([0.75, 0.0], &[r.clone()], 0.25));
        assert!(!is_collision([0.7499, 0.0], &[r], 0.25));
    }

    #[test]
    fn ray_hits() {
        let r = Obstacle::Rect {
            min: [2.0, -1.0],
            max: [3.0, 1.0],
        };
        assert_eq!(r.ray_hit([0.0, 0.0], [1.0, 0.0]), Some(2.0));
        assert_eq!(r.ray_hit([0.0, 0.0], [-1.0, 0.0]), None);
        assert_eq!(r.ray_hit([0.0, 5.0], [1.0, 0.0]), None);
        let c = Obstacle::Circle {
            center: [0.0, 3.0],
            radius: 1.0,
        };
        assert!((c.ray_hit([0.0, 0.0], [0.0, 1.0]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(c.ray_hit([0.0, 0.0], [0.0, -1.0]), None);
    }
}
