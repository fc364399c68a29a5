use super::config::{AttentionConfig, MixerMode};
use crate::numerics::BinaryMask;

/// Causal mask for `len` positions under the given mixer.
///
/// Every windowed mixer shares the same lossless pattern: query `i` sees key
/// `j ≤ i` when `j` is a sink or lies within the last `window` positions.
pub fn build_mask(len: usize, mode: MixerMode, cfg: &AttentionConfig) -> BinaryMask {
    match mode {
        MixerMode::Full => BinaryMask::from_fn(len, len, |i, j| j <= i),
        _ => {
            let (sinks, window) = (cfg.sinks, cfg.window);
            BinaryMask::from_fn(len, len, |i, j| j <= i && (j < sinks || i - j < window))
        }
    }
}
