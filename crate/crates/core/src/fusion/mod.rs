//! FusionNet: a return-to-go conditioned causal transformer over interleaved
//! `(rtg, state, action)` tokens, trained with a five-step angular loss and refined against
//! the critics of the three RL policies.

pub mod loss;
pub mod model;
pub mod track;
pub mod train;

pub use loss::{actor_objective, dist_cos_weights, loss_dist_cos, CriticView, LossParts, WindowBatch};
pub use model::{FusionConfig, FusionModel, FusionNet, Prediction, Stage, StepRef, TokenBatch};
pub use track::{run_fused, FusedEpisode, DEFAULT_RTG0};
pub use train::{finetune, frozen_values, mcpft, pretrain, sample_windows, McpftLog, McpftSchedule, StageLog, TrainSchedule};

#[cfg(test)]
mod tests;
