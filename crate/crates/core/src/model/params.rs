use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::ahn::AhnParams;
use crate::error::Result;
use crate::numerics::{r, Real, Tensor};

/// Weights of one transformer block (projections stored input-major).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

const LAYER_ARRAYS: [&str; 9] = [
    "attn_norm",
    "wq",
    "wk",
    "wv",
    "wo",
    "mlp_norm",
    "w_gate",
    "w_up",
    "w_down",
];

impl<T: Real> LayerParams<T> {
    fn arrays(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Byte-level decoder: frozen-able base weights plus one memory module per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub ahn: Vec<AhnParams<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
}

/// A named parameter array and whether it belongs to a memory module.
pub struct NamedArray<'a, T> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    pub ahn: bool,
}

pub struct NamedArrayMut<'a, T> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    pub ahn: bool,
}

impl<T: Real> Model<T> {
    /// Deterministic initialisation. Base weights and memory weights draw from
    /// separate streams, so the base is identical across memory variants.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let q = cfg.n_q_heads * cfg.head_dim;
        let kv = cfg.n_kv_heads * cfg.head_dim;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        // Residual-branch outputs are shrunk with depth.
        let out_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let embed = Tensor::randn(&[cfg.vocab, d], 1.0, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::full(&[1, d], T::one()),
                wq: Tensor::randn(&[d, q], fan(d), &mut rng),
                wk: Tensor::randn(&[d, kv], fan(d), &mut rng),
                wv: Tensor::randn(&[d, kv], fan(d), &mut rng),
                wo: Tensor::randn(&[q, d], fan(q) * out_scale, &mut rng),
                mlp_norm: Tensor::full(&[1, d], T::one()),
                w_gate: Tensor::randn(&[d, f], fan(d), &mut rng),
                w_up: Tensor::randn(&[d, f], fan(d), &mut rng),
                w_down: Tensor::randn(&[f, d], fan(f) * out_scale, &mut rng),
            })
            .collect();
        let final_norm = Tensor::full(&[1, d], T::one());
        let lm_head = Tensor::randn(&[d, cfg.vocab], fan(d), &mut rng);
        let mut ahn_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA4A4_0000_0000_0001);
        let ahn = (0..cfg.n_layers)
            .map(|_| AhnParams::init(cfg.ahn_variant, cfg.ahn_dims(), &mut ahn_rng))
            .collect::<Result<_>>()?;
        Ok(Model {
            cfg: cfg.clone(),
            embed,
            layers,
            ahn,
            final_norm,
            lm_head,
        })
    }

    /// All arrays in checkpoint order.
    pub fn arrays(&self) -> Vec<NamedArray<'_, T>> {
        let base = |name: String, tensor| NamedArray {
            name,
            tensor,
            ahn: false,
        };
        let mut out = vec![base("embed".into(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (n, t) in LAYER_ARRAYS.iter().zip(layer.arrays()) {
                out.push(base(format!("layers.{l}.{n}"), t));
            }
        }
        out.push(base("final_norm".into(), &self.final_norm));
        out.push(base("lm_head".into(), &self.lm_head));
        for (l, a) in self.ahn.iter().enumerate() {
            for (n, t) in a.arrays() {
                out.push(NamedArray {
                    name: format!("layers.{l}.ahn.{n}"),
                    tensor: t,
                    ahn: true,
                });
            }
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<NamedArrayMut<'_, T>> {
        let mut out = vec![NamedArrayMut {
            name: "embed".into(),
            tensor: &mut self.embed,
            ahn: false,
        }];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (n, t) in LAYER_ARRAYS.iter().zip(layer.arrays_mut()) {
                out.push(NamedArrayMut {
                    name: format!("layers.{l}.{n}"),
                    tensor: t,
                    ahn: false,
                });
            }
        }
        out.push(NamedArrayMut {
            name: "final_norm".into(),
            tensor: &mut self.final_norm,
            ahn: false,
        });
        out.push(NamedArrayMut {
            name: "lm_head".into(),
            tensor: &mut self.lm_head,
            ahn: false,
        });
        for (l, a) in self.ahn.iter_mut().enumerate() {
            for (n, t) in a.arrays_mut() {
                out.push(NamedArrayMut {
                    name: format!("layers.{l}.ahn.{n}"),
                    tensor: t,
                    ahn: true,
                });
            }
        }
        out
    }

    /// SHA-256 over every base (non-memory) array, for the freeze invariant.
    pub fn base_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for a in self.arrays().into_iter().filter(|a| !a.ahn) {
            h.update(a.name.as_bytes());
            h.update(T::to_le_bytes_vec(a.tensor.data()));
        }
        h.finalize().into()
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.tensor.len()).sum()
    }

    /// Memory-module parameters (all layers, biases included).
    pub fn ahn_param_count(&self) -> usize {
        self.ahn.iter().map(AhnParams::param_count).sum()
    }

    /// Converts every array to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::init(&self.cfg, 0).expect("config already validated");
        for (dst, src) in out.arrays_mut().into_iter().zip(self.arrays()) {
            *dst.tensor = src.tensor.cast();
        }
        out
    }

    /// Closes every memory output gate (`γ = 0`).
    pub fn close_gates(&mut self) {
        for a in &mut self.ahn {
            a.gamma.w = Tensor::zeros(a.gamma.w.shape());
            a.gamma.b = Tensor::full(a.gamma.b.shape(), r(f64::NEG_INFINITY));
        }
    }
}
