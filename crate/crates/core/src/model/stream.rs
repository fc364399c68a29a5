//! Token-at-a-time decoding over bounded caches.

use super::config::Mixer;
use super::forward::NORM_EPS;
use super::params::Model;
use crate::ahn::{ahn_readout, mix, update_in_place, CompressedState};
use crate::attention::{attend_segments, ct_slots, AttentionConfig, CtMemory, KvWindow, MixerMode};
use crate::error::{Error, Result};
use crate::numerics::{apply_rope, gemm_into, r, rope_tables, sigmoid, Real, Tensor};

#[derive(Clone, Debug)]
struct LayerState<T> {
    kv: KvWindow<T>,
    memory: Option<CompressedState<T>>,
    ct: Option<CtMemory<T>>,
}

/// Per-stream caches of every layer.
#[derive(Clone, Debug)]
pub struct StreamState<T> {
    mixer: Mixer,
    attention: AttentionConfig,
    pos: usize,
    evictions: usize,
    layers: Vec<LayerState<T>>,
}

impl<T: Real> StreamState<T> {
    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Pairs evicted so far, summed over layers.
    pub fn evictions(&self) -> usize {
        self.evictions
    }

    pub fn mixer(&self) -> Mixer {
        self.mixer
    }

    pub fn memory(&self, layer: usize) -> Option<&CompressedState<T>> {
        self.layers.get(layer).and_then(|l| l.memory.as_ref())
    }

    /// Rows held by one layer's attention cache (plus pooled slots).
    pub fn cached_rows(&self, layer: usize) -> usize {
        self.layers
            .get(layer)
            .map_or(0, |l| l.kv.len() + l.ct.as_ref().map_or(0, CtMemory::len))
    }
}

fn vec_mat<T: Real>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (rows, cols) = w.dims2();
    let mut out = vec![T::zero(); cols];
    gemm_into(x, 1, rows, false, w.data(), rows, cols, false, &mut out, false);
    out
}

fn rms_norm_row<T: Real>(x: &[T], gain: &Tensor<T>) -> Vec<T> {
    let ms = x.iter().map(|&v| v * v).sum::<T>() / r(x.len() as f64);
    let inv = T::one() / (ms + r(NORM_EPS)).sqrt();
    x.iter().zip(gain.data()).map(|(&v, &g)| v * inv * g).collect()
}

impl<T: Real> Model<T> {
    pub fn stream_state(&self, mixer: &Mixer) -> Result<StreamState<T>> {
        let cfg = &self.cfg;
        let attention = mixer.attention(cfg);
        attention.validate()?;
        let kvw = attention.kv_width();
        let layers = (0..cfg.n_layers)
            .map(|_| {
                Ok(LayerState {
                    kv: match mixer.mode {
                        MixerMode::Full => KvWindow::unbounded(kvw, cfg.d_model),
                        _ => KvWindow::new(mixer.sinks, mixer.window, kvw, cfg.d_model),
                    },
                    memory: match mixer.mode {
                        MixerMode::SinksSwaAhn(v) if v == cfg.ahn_variant => {
                            Some(CompressedState::zeros(cfg.n_q_heads, cfg.head_dim))
                        }
                        MixerMode::SinksSwaAhn(_) => return Err(Error::UnknownMode(mixer.mode.to_string())),
                        _ => None,
                    },
                    ct: match mixer.mode {
                        MixerMode::SinksSwaCt(pool) => {
                            Some(CtMemory::new(cfg.ct_rate, ct_slots(&attention), pool, kvw)?)
                        }
                        _ => None,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(StreamState {
            mixer: *mixer,
            attention,
            pos: 0,
            evictions: 0,
            layers,
        })
    }

    /// Consumes one token and returns the next-token logits.
    pub fn stream_step(&self, state: &mut StreamState<T>, token: usize) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        if token >= cfg.vocab {
            return Err(Error::Token {
                token,
                vocab: cfg.vocab,
            });
        }
        if state.layers.len() != cfg.n_layers || state.attention.kv_width() != cfg.attention().kv_width() {
            return Err(Error::Config("stream state was built for a different model".into()));
        }
        let hd = cfg.head_dim;
        let pos = state.pos;
        let (cos, sin) = rope_tables::<T>(&[pos], hd, cfg.rope_base);
        let mut x = self.embed.row(token).to_vec();
        for (l, (lp, ls)) in self.layers.iter().zip(state.layers.iter_mut()).enumerate() {
            let a = rms_norm_row(&x, &lp.attn_norm);
            let mut q = vec_mat(&a, &lp.wq);
            let mut k = vec_mat(&a, &lp.wk);
            let v = vec_mat(&a, &lp.wv);
            if cfg.uses_rope() {
                let qw = q.len();
                apply_rope(&mut q, qw, hd, &cos, &sin, false);
                let kw = k.len();
                apply_rope(&mut k, kw, hd, &cos, &sin, false);
            }
            if let Some(evicted) = ls.kv.append(&k, &v, &a, pos)? {
                state.evictions += 1;
                if let Some(mem) = ls.memory.as_mut() {
                    update_in_place(mem, &evicted, &self.ahn[l])?;
                }
                if let Some(ct) = ls.ct.as_mut() {
                    ct.push(&evicted)?;
                }
            }
            let mut keys = ls.kv.key_segments();
            let mut values = ls.kv.value_segments();
            if let Some(ct) = &ls.ct {
                keys.extend(ct.key_segments());
                values.extend(ct.value_segments());
            }
            let mut y = attend_segments(&q, &keys, &values, &state.attention)?;
            if let Some(mem) = &ls.memory {
                if mem.step() > 0 {
                    y = mix(&ahn_readout(&q, mem, &a, &self.ahn[l])?, &y)?;
                }
            }
            let o = vec_mat(&y, &lp.wo);
            x.iter_mut().zip(&o).for_each(|(xi, &oi)| *xi = *xi + oi);
            let m = rms_norm_row(&x, &lp.mlp_norm);
            let gate = vec_mat(&m, &lp.w_gate);
            let up = vec_mat(&m, &lp.w_up);
            let f: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| g * sigmoid(g) * u).collect();
            let down = vec_mat(&f, &lp.w_down);
            x.iter_mut().zip(&down).for_each(|(xi, &di)| *xi = *xi + di);
        }
        state.pos += 1;
        let h = rms_norm_row(&x, &self.final_norm);
        let logits = vec_mat(&h, &self.lm_head);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits at position {pos}")));
        }
        Ok(logits)
    }

    /// Streams `tokens` and stacks the logits, `[L, vocab]`.
    pub fn stream_all(&self, tokens: &[usize], mixer: &Mixer) -> Result<Tensor<T>> {
        let mut state = self.stream_state(mixer)?;
        let mut rows = Vec::with_capacity(tokens.len());
        for &t in tokens {
            rows.push(self.stream_step(&mut state, t)?);
        }
        Tensor::from_rows(&rows)
    }
}
