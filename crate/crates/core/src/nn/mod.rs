//! Transformer building blocks: embeddings, attention, feed-forward,
//! layer normalization and per-domain residual adapters.

mod adapter;
mod attention;
mod embedding;
mod ffn;
mod init;
mod norm;

pub use adapter::{Adapter, AdapterBank};
pub use attention::AttentionLayer;
pub use embedding::{sinusoidal_positions, Embedding};
pub use ffn::FfnLayer;
pub use init::Init;
pub use norm::{LayerNorm, LAYER_NORM_EPS};
