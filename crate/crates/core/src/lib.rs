//! Desk-scale point-cloud neural operator: a supernode message-passing
//! encoder pools irregular point clouds into a fixed-size latent state, a
//! transformer approximator steps that state forward in time, and a
//! cross-attention decoder reads the state out at arbitrary query positions.
//! Includes a from-scratch reverse-mode autodiff engine, analytic fluid data
//! generators with PDE residual oracles, a training loop with inverse
//! encoding/decoding losses, and rollout evaluation utilities.

pub mod blocks;
pub mod container;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod svg;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
