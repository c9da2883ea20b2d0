//! Safe model-based reinforcement learning for planar robots: probabilistic
//! ensemble dynamics models, learned Lipschitz-certified control barrier
//! functions and a sampling-based MPC that enforces the barrier constraint
//! on every sampled particle.

pub mod agent;
pub mod bounds;
pub mod envs;
pub mod error;
pub mod geometry;
pub mod learning;
pub mod model;
pub mod neural;
pub mod planner;
pub mod rng;
pub mod sensor;
pub mod testkit;

pub use error::{Error, Result};
pub use rng::RandomStream;
