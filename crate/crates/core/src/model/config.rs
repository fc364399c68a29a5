use sha2::{Digest, Sha256};

use crate::ahn::{AhnDims, AhnVariant};
use crate::attention::{AttentionConfig, MixerMode};
use crate::error::{Error, Result};
use crate::kvtext::KvText;

/// Byte vocabulary plus one padding id.
pub const BYTE_VOCAB: usize = 257;
pub const PAD: usize = 256;

/// Architecture and default mixer of the byte-level decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// MLP hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub sinks: usize,
    pub window: usize,
    pub mixer_mode: MixerMode,
    pub ahn_variant: AhnVariant,
    pub rope_base: f64,
    /// Evicted pairs per pooled slot in the compressive baseline.
    pub ct_rate: usize,
}

const KEYS: [&str; 13] = [
    "vocab",
    "d_model",
    "n_layers",
    "n_q_heads",
    "n_kv_heads",
    "head_dim",
    "ffn_mult",
    "sinks",
    "window",
    "mixer_mode",
    "ahn_variant",
    "rope_base",
    "ct_rate",
];

/// Keys that determine the parameter layout.
const ARCH_KEYS: [&str; 9] = [
    "vocab",
    "d_model",
    "n_layers",
    "n_q_heads",
    "n_kv_heads",
    "head_dim",
    "ffn_mult",
    "ahn_variant",
    "rope_base",
];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: D=128, 4 layers, 4 query / 2 kv heads of width 32, W=64, 4 sinks.
    pub fn toy() -> Self {
        ModelConfig {
            vocab: BYTE_VOCAB,
            d_model: 128,
            n_layers: 4,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 32,
            ffn_mult: 2,
            sinks: 4,
            window: 64,
            mixer_mode: MixerMode::SinksSwaAhn(AhnVariant::Gdn),
            ahn_variant: AhnVariant::Gdn,
            rope_base: 10_000.0,
            ct_rate: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.n_layers == 0 || self.ffn_mult == 0 || self.ct_rate == 0 {
            return Err(Error::Config(
                "vocab, n_layers, ffn_mult and ct_rate must be positive".into(),
            ));
        }
        self.attention().validate()?;
        if self.d_model != self.n_q_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_q_heads · head_dim ({})",
                self.d_model,
                self.n_q_heads * self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("head_dim must be even for rotary embeddings".into()));
        }
        if !(self.rope_base == 0.0 || (self.rope_base > 1.0 && self.rope_base.is_finite())) {
            return Err(Error::Config(
                "rope_base must be 0 (no rotary embedding) or a finite number above 1".into(),
            ));
        }
        if let MixerMode::SinksSwaAhn(v) = self.mixer_mode {
            if v != self.ahn_variant {
                return Err(Error::Config(format!(
                    "mixer_mode {} does not match ahn_variant {}",
                    self.mixer_mode, self.ahn_variant
                )));
            }
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n_q_heads: self.n_q_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            sinks: self.sinks,
            window: self.window,
        }
    }

    pub fn ahn_dims(&self) -> AhnDims {
        AhnDims {
            d_model: self.d_model,
            n_heads: self.n_q_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
        }
    }

    /// `rope_base == 0` turns rotary position embedding off.
    pub fn uses_rope(&self) -> bool {
        self.rope_base != 0.0
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// The configured mixer.
    pub fn mixer(&self) -> Mixer {
        Mixer {
            mode: self.mixer_mode,
            sinks: self.sinks,
            window: self.window,
        }
    }

    pub fn to_kv(&self) -> KvText {
        let mut t = KvText::default();
        t.set("vocab", self.vocab);
        t.set("d_model", self.d_model);
        t.set("n_layers", self.n_layers);
        t.set("n_q_heads", self.n_q_heads);
        t.set("n_kv_heads", self.n_kv_heads);
        t.set("head_dim", self.head_dim);
        t.set("ffn_mult", self.ffn_mult);
        t.set("sinks", self.sinks);
        t.set("window", self.window);
        t.set("mixer_mode", self.mixer_mode);
        t.set("ahn_variant", self.ahn_variant);
        t.set("rope_base", self.rope_base);
        t.set("ct_rate", self.ct_rate);
        t
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// Reads the model keys from `kv`, falling back to [`ModelConfig::toy`] for absent ones.
    pub fn from_kv(kv: &KvText) -> Result<Self> {
        let d = Self::toy();
        let ahn_variant = kv.get("ahn_variant")?.unwrap_or(d.ahn_variant);
        let cfg = ModelConfig {
            vocab: kv.get("vocab")?.unwrap_or(d.vocab),
            d_model: kv.get("d_model")?.unwrap_or(d.d_model),
            n_layers: kv.get("n_layers")?.unwrap_or(d.n_layers),
            n_q_heads: kv.get("n_q_heads")?.unwrap_or(d.n_q_heads),
            n_kv_heads: kv.get("n_kv_heads")?.unwrap_or(d.n_kv_heads),
            head_dim: kv.get("head_dim")?.unwrap_or(d.head_dim),
            ffn_mult: kv.get("ffn_mult")?.unwrap_or(d.ffn_mult),
            sinks: kv.get("sinks")?.unwrap_or(d.sinks),
            window: kv.get("window")?.unwrap_or(d.window),
            mixer_mode: kv.get("mixer_mode")?.unwrap_or(MixerMode::SinksSwaAhn(ahn_variant)),
            ahn_variant,
            rope_base: kv.get("rope_base")?.unwrap_or(d.rope_base),
            ct_rate: kv.get("ct_rate")?.unwrap_or(d.ct_rate),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Strict parse: every key must be a model key.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvText::parse(text)?;
        kv.reject_unknown(&KEYS)?;
        Self::from_kv(&kv)
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// SHA-256 over the keys that fix the parameter layout only.
    pub fn arch_hash(&self) -> [u8; 32] {
        let kv = self.to_kv();
        let mut h = Sha256::new();
        for k in ARCH_KEYS {
            h.update(format!("{k}={}\n", kv.get_str(k).unwrap_or_default()));
        }
        h.finalize().into()
    }

    /// Same parameter layout, so weights are interchangeable.
    pub fn same_arch(&self, other: &ModelConfig) -> bool {
        self.arch_hash() == other.arch_hash()
    }
}

/// Token mixer used for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mixer {
    pub mode: MixerMode,
    pub sinks: usize,
    pub window: usize,
}

impl Mixer {
    pub fn full() -> Self {
        Mixer {
            mode: MixerMode::Full,
            sinks: 0,
            window: usize::MAX / 4,
        }
    }

    pub fn with_mode(self, mode: MixerMode) -> Self {
        Mixer { mode, ..self }
    }

    pub fn attention(&self, cfg: &ModelConfig) -> AttentionConfig {
        AttentionConfig {
            sinks: self.sinks,
            window: self.window,
            ..cfg.attention()
        }
    }
}
