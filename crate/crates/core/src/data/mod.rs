//! Event logs, voucher sessions, behavior graphs and encoded datasets.

pub mod dataset;
pub mod ingest;
pub mod session;
pub mod stats;
pub mod types;
pub mod uvg;

pub use dataset::{Dataset, DatasetConfig, EncodedUvg, NodeFeat, ProfileFeat, Sample, Vocab, Vocabs, VoucherFeat};
pub use ingest::{ingest, ingest_dir, RawData, Reject};
pub use session::{build_session, SessionConfig};
pub use stats::{dataset_stats, ActionStats, DatasetStats};
pub use types::{session_key, Action, Event, Id, UserProfile, VoucherInfo, VoucherSession, Zone};
pub use uvg::{build_uvg, check_uvg, EdgeDir, EdgeKind, Uvg, UvgMode};
