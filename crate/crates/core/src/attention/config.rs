use std::fmt;
use std::str::FromStr;

use crate::ahn::AhnVariant;
use crate::error::{Error, Result};

/// Head layout and lossless-memory extent of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub sinks: usize,
    pub window: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_q_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("head counts and head_dim must be positive".into()));
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_q_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(())
    }

    /// Query heads served by each key/value head.
    pub fn group(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    pub fn q_width(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Tokens held losslessly: sinks plus the sliding window.
    pub fn span(&self) -> usize {
        self.sinks.saturating_add(self.window)
    }
}

/// Reduction used by the compressive-transformer baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pool {
    Max,
    Avg,
}

/// Token mixer selected at run time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixerMode {
    Full,
    SinksSwa,
    SinksSwaAhn(AhnVariant),
    SinksSwaCt(Pool),
}

impl MixerMode {
    pub fn is_windowed(self) -> bool {
        !matches!(self, MixerMode::Full)
    }

    pub fn has_memory(self) -> bool {
        matches!(self, MixerMode::SinksSwaAhn(_))
    }
}

impl fmt::Display for MixerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixerMode::Full => f.write_str("full"),
            MixerMode::SinksSwa => f.write_str("swa"),
            MixerMode::SinksSwaAhn(v) => write!(f, "ahn-{v}"),
            MixerMode::SinksSwaCt(Pool::Max) => f.write_str("ct-max"),
            MixerMode::SinksSwaCt(Pool::Avg) => f.write_str("ct-avg"),
        }
    }
}

impl FromStr for MixerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MixerMode::Full),
            "swa" => Ok(MixerMode::SinksSwa),
            "ct-max" => Ok(MixerMode::SinksSwaCt(Pool::Max)),
            "ct-avg" => Ok(MixerMode::SinksSwaCt(Pool::Avg)),
            other => match other.strip_prefix("ahn-") {
                Some(v) => Ok(MixerMode::SinksSwaAhn(v.parse()?)),
                None => Err(Error::UnknownMode(other.to_string())),
            },
        }
    }
}
