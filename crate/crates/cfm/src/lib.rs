//! Consistency flow matching on synthetic conditional 2-D densities.
//!
//! Trains a conditional velocity field in two stages — straight flow toward
//! ground-truth segment endpoints, then velocity-consistency along the
//! trajectory — with optional adversarial fine-tuning, and samples from it
//! with a few-step Euler solver. Everything runs on a small f64 tensor
//! substrate with tape-based reverse-mode differentiation and counter-based
//! deterministic randomness, so runs reproduce bitwise from a seed.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nets;
pub mod objectives;
pub mod sampler;
pub mod schedules;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
