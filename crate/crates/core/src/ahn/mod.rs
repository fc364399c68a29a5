//! Artificial hippocampus: a fixed-size recurrent memory that absorbs the
//! key/value pairs evicted from the attention window and is read by the
//! current query.

mod params;
mod scan;
mod state;
mod tape;
mod update;

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub use params::{AhnDims, AhnParams, Gate};
pub use scan::{chunk_scan, sequential_scan, AhnScanOp, ScanSpec, DEFAULT_CHUNK};
pub use state::CompressedState;
pub use tape::{ahn_branch, AhnVars};
pub use update::{
    ahn_readout, dn_update, gdn_update, mamba2_update, mix, normalize_key, step_head, update_in_place, StepGates,
};

/// Recurrence used to compress evicted pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AhnVariant {
    /// Gated delta rule.
    Gdn,
    /// Delta rule without decay.
    Dn,
    /// Scalar-decay accumulate.
    Mamba2,
}

impl AhnVariant {
    pub const ALL: [AhnVariant; 3] = [AhnVariant::Gdn, AhnVariant::Dn, AhnVariant::Mamba2];
}

impl fmt::Display for AhnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AhnVariant::Gdn => "gdn",
            AhnVariant::Dn => "dn",
            AhnVariant::Mamba2 => "mamba2",
        })
    }
}

impl FromStr for AhnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "gdn" => Ok(AhnVariant::Gdn),
            "dn" => Ok(AhnVariant::Dn),
            "mamba2" => Ok(AhnVariant::Mamba2),
            other => Err(Error::UnknownMode(format!("ahn-{other}"))),
        }
    }
}
