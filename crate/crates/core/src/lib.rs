//! Hybrid motion-planning and imitation-bootstrapped reinforcement learning
//! for sparse-reward manipulation.
//!
//! A mode classifier decides each step whether the gripper is far from the
//! objects (navigate to a predicted waypoint with a sampling-based planner)
//! or about to interact (let a behaviour-cloned policy and a TD3 actor
//! propose actions and pick the one the critics rate higher).

pub mod agent;
pub mod codec;
pub mod env;
pub mod error;
pub mod expert;
pub mod geom;
pub mod heads;
pub mod imitation;
pub mod planner;
pub mod rng;
pub mod td3;
pub mod tensor;

pub use error::{Error, Result};
