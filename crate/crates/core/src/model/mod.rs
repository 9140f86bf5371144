//! The graph-plus-attention redemption model and the shared trainer.

pub mod attention;
pub mod dmbgn;
pub mod encoder;
pub mod train;

pub use attention::{AttOuter, AttentionPairs, AttentionUnit};
pub use dmbgn::{Dmbgn, DmbgnConfig, Init};
pub use encoder::{gnn_layer, topk_select, EncoderConfig, UvgEncoder, UvgInput, UvgOutput, Zones};
pub use train::{predict, train, user_batches, EpochLog, Forward, Network, TrainConfig};
