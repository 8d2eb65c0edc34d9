//! The SCANet classifier and its ablation baseline.
//!
//! Data flow for a batch of `N` studies of `S` slices:
//!
//! ```text
//! [N*S, C, H, W]  global conv block (shared over slices)
//! [N*S, C1, h, w] SAT: 1x1 projection + positional embedding + encoder layers
//! [N*S, T, D]     neighborhood partition (K slices per group, B groups)
//! [N*B*K, D, h, w] shared residual branch + global average pool
//! [N*B, K, E]     CAT over the K slices
//! [N*B, 2]        shared head
//! [N, 2]          softmax-weighted branch fusion, class softmax
//! ```

mod attention;
mod branch;
mod config;
mod layers;
mod scanet;

pub use attention::{Cat, Dropout, EncoderLayer, MultiHeadAttention, Sat};
pub use branch::{BasicBlock, Branch};
pub use config::{ConvSpec, ModelConfig, Variant};
pub(crate) use config::parse;
pub use layers::{Conv, GroupNorm, LayerNorm, Linear, Mlp, ParamSet, NORM_EPS};
pub use scanet::{
    aggregate, neighborhood_partition, parse_model_card, predicted_class, stack_studies, AttentionRecord,
    ForwardOutput, ScaNet,
};
