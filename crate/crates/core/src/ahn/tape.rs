use super::params::{AhnParams, Gate};
use super::scan::{AhnScanOp, ScanSpec};
use super::update::KEY_NORM_EPS;
use super::AhnVariant;
use crate::error::Result;
use crate::numerics::{Real, Tape, Tensor, Var};

/// Tape handles of one layer's memory parameters.
#[derive(Clone, Debug)]
pub struct AhnVars {
    pub variant: AhnVariant,
    pub n_heads: usize,
    pub group: usize,
    pub head_dim: usize,
    pub alpha: Option<(Var, Var)>,
    pub beta: Option<(Var, Var)>,
    pub delta: Option<(Var, Var)>,
    pub a_log: Option<Var>,
    pub gamma: (Var, Var),
    pub w_out: Var,
}

fn put<T: Real>(tape: &mut Tape<T>, t: &Tensor<T>, trainable: bool) -> Var {
    tape.leaf(t.clone(), trainable)
}

fn put_gate<T: Real>(tape: &mut Tape<T>, g: &Gate<T>, trainable: bool) -> (Var, Var) {
    (put(tape, &g.w, trainable), put(tape, &g.b, trainable))
}

impl AhnVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, p: &AhnParams<T>, trainable: bool) -> Self {
        AhnVars {
            variant: p.variant,
            n_heads: p.n_heads,
            group: p.n_heads / p.n_kv_heads,
            head_dim: p.head_dim,
            alpha: p.alpha.as_ref().map(|g| put_gate(tape, g, trainable)),
            beta: p.beta.as_ref().map(|g| put_gate(tape, g, trainable)),
            delta: p.delta.as_ref().map(|g| put_gate(tape, g, trainable)),
            a_log: p.a_log.as_ref().map(|a| put(tape, a, trainable)),
            gamma: put_gate(tape, &p.gamma, trainable),
            w_out: put(tape, &p.w_out, trainable),
        }
    }

    /// Named handles in the same order as [`AhnParams::arrays`].
    pub fn vars(&self) -> Vec<(&'static str, Var)> {
        let mut out = Vec::new();
        if let Some((w, b)) = self.alpha {
            out.extend([("alpha.w", w), ("alpha.b", b)]);
        }
        if let Some((w, b)) = self.beta {
            out.extend([("beta.w", w), ("beta.b", b)]);
        }
        if let Some((w, b)) = self.delta {
            out.extend([("delta.w", w), ("delta.b", b)]);
        }
        if let Some(a) = self.a_log {
            out.push(("a_log", a));
        }
        out.extend([
            ("gamma.w", self.gamma.0),
            ("gamma.b", self.gamma.1),
            ("w_out", self.w_out),
        ]);
        out
    }
}

fn logits<T: Real>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let rows = tape.value(x).rows();
    let xw = tape.matmul(x, w)?;
    let b = tape.repeat_rows(b, rows)?;
    tape.add(xw, b)
}

/// Memory branch of one layer on a whole sequence, in per-head space
/// (`[L, n_heads · head_dim]`, before the shared output projection).
///
/// `x` is the layer's normalised input, `q` the rotated queries, `k` and `v`
/// the cached (rotated) keys and values with one block per kv head.
pub fn ahn_branch<T: Real>(
    tape: &mut Tape<T>,
    vars: &AhnVars,
    x: Var,
    q: Var,
    k: Var,
    v: Var,
    sinks: usize,
    window: usize,
) -> Result<Var> {
    let rows = tape.value(x).rows();
    let n = vars.n_heads;
    let hd = vars.head_dim;
    let k = tape.repeat_col_blocks(k, hd, vars.group)?;
    let v = tape.repeat_col_blocks(v, hd, vars.group)?;
    let (k, decay, erase, write) = match vars.variant {
        AhnVariant::Gdn | AhnVariant::Dn => {
            let k = tape.l2_norm_blocks(k, hd, KEY_NORM_EPS)?;
            let beta = logits(tape, x, vars.beta.expect("beta gate"))?;
            let beta = tape.sigmoid(beta);
            let decay = match vars.alpha {
                Some(a) if vars.variant == AhnVariant::Gdn => {
                    let a = logits(tape, x, a)?;
                    tape.sigmoid(a)
                }
                _ => tape.constant(Tensor::full(&[rows, n], T::one())),
            };
            (k, decay, beta, beta)
        }
        AhnVariant::Mamba2 => {
            let d = logits(tape, x, vars.delta.expect("delta gate"))?;
            let d = tape.softplus(d);
            let a = tape.exp(vars.a_log.expect("a_log"));
            let a = tape.repeat_rows(a, rows)?;
            let da = tape.mul(d, a)?;
            let neg = tape.scale(da, -T::one());
            let decay = tape.exp(neg);
            let erase = tape.constant(Tensor::zeros(&[rows, n]));
            (k, decay, erase, d)
        }
    };
    let spec = ScanSpec {
        sinks,
        window,
        heads: n,
        head_dim: hd,
    };
    let read = AhnScanOp::record(tape, spec, [q, k, v, decay, erase, write])?;
    let gamma = logits(tape, x, vars.gamma)?;
    let gamma = tape.sigmoid(gamma);
    let gamma = tape.repeat_col_blocks(gamma, 1, hd)?;
    let gated = tape.mul(read, gamma)?;
    tape.head_matmul(gated, vars.w_out, n)
}
