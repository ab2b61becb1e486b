//! Dense tensors, tape autodiff, MLP / GPT building blocks, AdamW and `CKP1` checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Binding, Gradients, Graph, Var};
pub use layers::{Dropout, GptBlock, GptBlockStack, GptConfig, Init, LayerNorm, Linear, Mlp, ParamSet};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::{Scalar, Tensor};
