//! Causal attention under full, sinks+window and compressive masking, and the
//! lossless KV cache that evicts pairs leaving the window.

mod attend;
mod config;
mod ct;
mod kv;
mod mask;

pub use crate::numerics::BinaryMask;
pub use attend::{attend, attend_cached, attend_segments, attend_tape, expand_kv, project_qkv, QkvWeights};
pub use config::{AttentionConfig, MixerMode, Pool};
pub use ct::{ct_compress, ct_slots, pool_rows, pool_rows_tape, CtMemory};
pub use kv::{EvictedPair, KvWindow};
pub use mask::build_mask;
