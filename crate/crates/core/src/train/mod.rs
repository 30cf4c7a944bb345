//! Multi-stage contrastive training: plans, the loss, the optimizer, and the
//! stage/plan runners.

pub mod infonce;
pub mod optim;
pub mod plan;
pub mod stage;

pub use infonce::infonce_loss;
pub use optim::{cosine_lr, AdamW};
pub use plan::{StageConfig, TrainPlan};
pub use stage::{run_plan, PairStream, PlanOutcome, StepMetrics, Trainer};
