//! Decoder-only byte language model whose attention runs over attention sinks
//! plus a sliding window, with a learnable recurrent memory that absorbs every
//! key/value pair evicted from the window.

pub mod ahn;
pub mod analysis;
pub mod attention;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod fsutil;
pub mod kvtext;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
