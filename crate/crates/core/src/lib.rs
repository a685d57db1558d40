//! Driving-behaviour imitation toolkit: a two-lane road simulator, a scripted
//! expert, Gaussian-process models of track position and speed, the
//! expert-derived rewards, a small MDN actor-critic trained with PPO, and
//! distribution-level evaluation.

pub mod config;
pub mod error;
pub mod eval;
pub mod expert;
pub mod geom;
pub mod gp;
pub mod io;
pub mod logs;
pub mod nn;
pub mod ppo;
pub mod reward;
pub mod session;
pub mod sim;
pub mod track;

pub use error::{Error, Result};
