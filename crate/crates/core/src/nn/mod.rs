//! Network layers built on the differentiation tape.

mod layers;
mod pass;

pub use layers::{
    dropout, global_avg_pool, BatchNorm1d, Conv1d, Layer, LayerSpec, Linear, Param, ParamAlloc, ResidualBlock,
    SeAttention, SpatialAttention,
};
pub use pass::{Mode, Pass};
