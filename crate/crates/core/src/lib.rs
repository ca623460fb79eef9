//! Goal-space discovery for goal-conditioned imitation in a toy gridworld.
//!
//! Gameplay from scripted experts trains a video encoder whose Gaussian
//! latent space instructs a gated cross-attention policy. The crate also
//! carries the inverse dynamics labeller, guided inference, skill chaining,
//! and an Elo evaluation harness.

pub mod agent;
pub mod config;
pub mod encoder;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod idm;
pub mod inference;
pub mod layers;
pub mod numerics;
pub mod optim;
pub mod policy;
pub mod seeds;
pub mod storage;
pub mod text;
pub mod train;

pub use error::{Error, Result};
