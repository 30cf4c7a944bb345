//! Contrastive image-text pretraining at desk scale: a small tensor autodiff
//! engine, token masking, ViT/transformer towers, the InfoNCE objective,
//! multi-stage training plans, zero-shot evaluation, and an analytical
//! compute-cost model that the op graph's own MAC counter must reproduce.

pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod mask;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{
    CheckpointError, CostError, DataError, EvalError, MaskError, ModelError, TensorError,
    TrainError,
};
pub use tensor::{Graph, NodeId, Precision, Tensor};
