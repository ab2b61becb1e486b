//! TD3, SAC and DDPG actor-critic agents for the tracking environment.

pub mod policy;
pub mod replay;
pub mod train;

pub use policy::{ActMode, Algo, Hyper, Net, PolicyBundle};
pub use replay::{Batch, ReplayBuffer};
pub use train::{evaluate_policy, random_baseline, rollout, train_policy, Actor, Learner, Schedule, TrainLog};
