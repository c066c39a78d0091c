//! Reference model of the sink ∥ INT2 history ∥ recent cache and its distortion metrics.

mod attention;
mod eval;
mod state;

pub use attention::{monolithic_attention, segmented_attention, AttentionSegment};
pub use eval::{
    evaluate_distortion, evaluate_dump, kl_divergence, summarize, DistortionReport, DistortionSummary, EvalMode,
    EvalOptions, IDENTITY_TOLERANCE, KL_FLOOR,
};
pub use state::{CacheCodec, CacheLayout, HistoryEntry, KvCacheState, Partition, StoredRow};
