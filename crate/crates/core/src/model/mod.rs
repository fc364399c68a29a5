//! Byte-level decoder-only language model with a selectable token mixer,
//! streaming decode, and checkpoint persistence.

mod checkpoint;
mod config;
mod forward;
mod params;
mod stream;

pub use checkpoint::{ArraySelect, Container, StoredArray, FLAG_AHN, MAGIC, VERSION};
pub use config::{Mixer, ModelConfig, BYTE_VOCAB, PAD};
pub use forward::{LayerVars, ModelVars, Trainable};
pub use params::{LayerParams, Model, NamedArray, NamedArrayMut};
pub use stream::StreamState;
