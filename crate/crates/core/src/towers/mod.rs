//! Item tower, session-aware user tower and the composite objective.

mod layers;
mod loss;
mod model;

pub use layers::{
    attention_pool, attention_weights, lag_bucket, session_encode, EmbeddingTable, SessionEncoder, TargetAttention,
    UserHead, LAG_BUCKETS,
};
pub use loss::{total_loss, tower_loss, CandidateScope, LossBundle};
pub use model::{ExampleOutput, ModelConfig, T2DiffModel, Variant};
