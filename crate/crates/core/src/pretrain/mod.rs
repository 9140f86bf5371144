//! Item-embedding and voucher pre-training, and the checkpoint container.

pub mod checkpoint;
pub mod sgns;
pub mod voucher;

pub use checkpoint::Checkpoint;
pub use sgns::{train_item_embeddings, ItemEmbeddings, SgnsConfig};
pub use voucher::{encode_sessions, pretrain_vouchers, VoucherPretrain, VoucherPretrainConfig};
