//! Cost model of the token mixers, the gradient probe and perplexity curves.

mod complexity;
mod ppl;
mod probe;

pub use self::complexity::{
    complexity, complexity_with, ct_slot_budget, flop_curve, preset, ratios, Complexity, ComplexitySpec, MixerKind,
    Ratios,
};
pub use self::ppl::{ppl_csv, ppl_curve, PplPoint};
pub use self::probe::{grad_probe, probe_loss, ProbeEntry, ProbeReport};
pub use crate::attention::ct_compress;
