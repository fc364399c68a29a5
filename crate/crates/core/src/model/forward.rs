//! Whole-sequence forward pass on a tape.

use super::config::{Mixer, ModelConfig};
use super::params::Model;
use crate::ahn::{ahn_branch, AhnVars};
use crate::attention::{attend_tape, build_mask, ct_slots, pool_rows_tape, BinaryMask, MixerMode};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-6;

/// Which arrays are registered as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Memory modules only (self-distillation).
    Ahn,
    Everything,
}

/// Tape handles of one block's base weights.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Every parameter of a [`Model`] placed on a tape, in checkpoint order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
    pub ahn: Vec<AhnVars>,
}

impl ModelVars {
    /// Handles in the same order as [`Model::arrays`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([
                l.attn_norm,
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.mlp_norm,
                l.w_gate,
                l.w_up,
                l.w_down,
            ]);
        }
        out.extend([self.final_norm, self.lm_head]);
        for a in &self.ahn {
            out.extend(a.vars().into_iter().map(|(_, v)| v));
        }
        out
    }
}

/// Per-forward constants shared by all blocks.
struct Context {
    positions: Vec<usize>,
    mask: BinaryMask,
    mixer: Mixer,
    /// Compressive baseline: pooled-group count and the group start row.
    ct_groups: usize,
}

impl<T: Real> Model<T> {
    pub fn register(&self, tape: &mut Tape<T>, train: Trainable) -> ModelVars {
        let base = train == Trainable::Everything;
        let mem = train != Trainable::Nothing;
        let mut put = |t: &Tensor<T>| tape.leaf(t.clone(), base);
        let embed = put(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: put(&l.attn_norm),
                wq: put(&l.wq),
                wk: put(&l.wk),
                wv: put(&l.wv),
                wo: put(&l.wo),
                mlp_norm: put(&l.mlp_norm),
                w_gate: put(&l.w_gate),
                w_up: put(&l.w_up),
                w_down: put(&l.w_down),
            })
            .collect();
        let final_norm = put(&self.final_norm);
        let lm_head = put(&self.lm_head);
        let ahn = self.ahn.iter().map(|a| AhnVars::register(tape, a, mem)).collect();
        ModelVars {
            embed,
            layers,
            final_norm,
            lm_head,
            ahn,
        }
    }

    /// Logits `[L, vocab]` for `tokens` under `mixer`, without recording gradients.
    pub fn forward(&self, tokens: &[usize], mixer: &Mixer) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let vars = self.register(&mut tape, Trainable::Nothing);
        let logits = self.forward_tape(&mut tape, &vars, tokens, mixer)?;
        Ok(tape.value(logits).clone())
    }

    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &ModelVars, tokens: &[usize], mixer: &Mixer) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let x = tape.gather_rows(vars.embed, tokens)?;
        self.forward_embedded(tape, vars, x, mixer)
    }

    /// Forward from input embeddings `[L, d_model]`.
    pub fn forward_embedded(&self, tape: &mut Tape<T>, vars: &ModelVars, x: Var, mixer: &Mixer) -> Result<Var> {
        let cfg = &self.cfg;
        let len = tape.value(x).rows();
        if len == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if let MixerMode::SinksSwaAhn(v) = mixer.mode {
            if v != cfg.ahn_variant {
                return Err(Error::UnknownMode(mixer.mode.to_string()));
            }
        }
        let acfg = mixer.attention(cfg);
        acfg.validate()?;
        let evicted = len.saturating_sub(acfg.span());
        let ct_groups = match mixer.mode {
            MixerMode::SinksSwaCt(_) => evicted / cfg.ct_rate,
            _ => 0,
        };
        let mask = if ct_groups > 0 {
            ct_mask(len, &acfg, cfg.ct_rate, ct_slots(&acfg), ct_groups)
        } else {
            build_mask(len, mixer.mode, &acfg)
        };
        let ctx = Context {
            positions: (0..len).collect(),
            mask,
            mixer: *mixer,
            ct_groups,
        };
        let mut h = x;
        for (l, lv) in vars.layers.iter().enumerate() {
            h = self.block(tape, lv, &vars.ahn[l], h, &ctx)?;
        }
        let h = rms_norm(tape, h, vars.final_norm)?;
        tape.matmul(h, vars.lm_head)
    }

    fn block(&self, tape: &mut Tape<T>, lv: &LayerVars, av: &AhnVars, h: Var, ctx: &Context) -> Result<Var> {
        let cfg: &ModelConfig = &self.cfg;
        let hd = cfg.head_dim;
        let group = cfg.n_q_heads / cfg.n_kv_heads;
        let a = rms_norm(tape, h, lv.attn_norm)?;
        let q = tape.matmul(a, lv.wq)?;
        let k = tape.matmul(a, lv.wk)?;
        let v = tape.matmul(a, lv.wv)?;
        let (q, k) = if cfg.uses_rope() {
            (
                tape.rope(q, &ctx.positions, hd, cfg.rope_base)?,
                tape.rope(k, &ctx.positions, hd, cfg.rope_base)?,
            )
        } else {
            (q, k)
        };
        let (mut ka, mut va) = (k, v);
        if ctx.ct_groups > 0 {
            let MixerMode::SinksSwaCt(pool) = ctx.mixer.mode else {
                unreachable!()
            };
            let start = ctx.mixer.sinks;
            let pk = pool_rows_tape(tape, k, start, cfg.ct_rate, ctx.ct_groups, pool)?;
            let pv = pool_rows_tape(tape, v, start, cfg.ct_rate, ctx.ct_groups, pool)?;
            ka = tape.concat_rows(&[k, pk])?;
            va = tape.concat_rows(&[v, pv])?;
        }
        let ke = tape.repeat_col_blocks(ka, hd, group)?;
        let ve = tape.repeat_col_blocks(va, hd, group)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut mixed = attend_tape(tape, q, ke, ve, &ctx.mask, cfg.n_q_heads, scale)?;
        if matches!(ctx.mixer.mode, MixerMode::SinksSwaAhn(_)) {
            let y = ahn_branch(tape, av, a, q, k, v, ctx.mixer.sinks, ctx.mixer.window)?;
            mixed = tape.add(mixed, y)?;
        }
        let o = tape.matmul(mixed, lv.wo)?;
        let h = tape.add(h, o)?;
        let m = rms_norm(tape, h, lv.mlp_norm)?;
        let gate = tape.matmul(m, lv.w_gate)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(m, lv.w_up)?;
        let f = tape.mul(gate, up)?;
        let f = tape.matmul(f, lv.w_down)?;
        tape.add(h, f)
    }
}

/// `x / rms(x) ⊙ gain` per row.
pub(crate) fn rms_norm<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var) -> Result<Var> {
    let rows = tape.value(x).rows();
    let n = tape.rms_norm_rows(x, NORM_EPS);
    let g = tape.repeat_rows(gain, rows)?;
    tape.mul(n, g)
}

/// Sinks+window mask over the `len` token columns followed by `groups` pooled
/// columns; query `t` sees the newest `slots` groups completed by time `t`.
pub(crate) fn ct_mask(
    len: usize,
    cfg: &crate::attention::AttentionConfig,
    rate: usize,
    slots: usize,
    groups: usize,
) -> BinaryMask {
    let span = cfg.span();
    BinaryMask::from_fn(len, len + groups, |i, j| {
        if j < len {
            j <= i && (j < cfg.sinks || i - j < cfg.window)
        } else {
            let done = (i + 1).saturating_sub(span) / rate;
            let g = j - len;
            g < done && g + slots >= done
        }
    })
}
