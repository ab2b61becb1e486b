//! Tract-specific reinforcement-learning tractography with GPT-based policy fusion.
//!
//! The crate is organized bottom-up:
//!
//! - [`phantom`]: synthetic diffusion fields (SH coefficients, peaks), tract masks and
//!   ground-truth bundles.
//! - [`nn`]: a small tape-based autodiff engine with MLP and causal-attention blocks, AdamW
//!   and the `CKP1` checkpoint format.
//! - [`env`]: the tracking MDP (state features, reward, termination).
//! - [`agents`]: TD3, SAC and DDPG actor-critic training with a replay buffer.
//! - [`geometry`]: streamlines, arc-length resampling, MDF distance, farthest sampling and
//!   the `STL1` format.
//! - [`eds`]: episodic data selection producing pretraining and finetuning trajectories.
//! - [`fusion`]: the return-to-go conditioned sequence model, its angular loss and the
//!   multi-critic finetuning stage.
//! - [`trackeval`]: inference-time tracking, post-filtering and Dice/OL/OR scoring.
//! - [`cli`]: configuration, manifests and the stage runner behind the `tractfuse` binary.

pub mod agents;
pub mod binio;
pub mod cli;
pub mod eds;
pub mod env;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod trackeval;
pub mod vec3;

pub use error::{Error, Result};
