//! Single-step memory updates and the gated readout.

use super::params::AhnParams;
use super::state::CompressedState;
use super::AhnVariant;
use crate::attention::EvictedPair;
use crate::error::{Error, Result};
use crate::numerics::{gemm_into, r, Real};

pub(crate) const KEY_NORM_EPS: f64 = 1e-20;

/// Coefficients of one update `h' = decay·(I − erase·k kᵀ)·h + write·k vᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepGates<T> {
    pub decay: T,
    pub erase: T,
    pub write: T,
}

impl<T: Real> StepGates<T> {
    pub fn gdn(alpha: T, beta: T) -> Self {
        StepGates {
            decay: alpha,
            erase: beta,
            write: beta,
        }
    }

    pub fn dn(beta: T) -> Self {
        Self::gdn(T::one(), beta)
    }

    /// Scalar-decay accumulate with decay `exp(−Δ·A)`.
    pub fn mamba2(delta: T, a: T) -> Self {
        StepGates {
            decay: (-(delta * a)).exp(),
            erase: T::zero(),
            write: delta,
        }
    }

    fn check(&self) -> Result<()> {
        if self.decay.is_finite() && self.erase.is_finite() && self.write.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("memory gate".into()))
        }
    }
}

/// Applies one update to a single head's `H × H` memory in place.
pub fn step_head<T: Real>(h: &mut [T], k: &[T], v: &[T], g: StepGates<T>) {
    let n = k.len();
    debug_assert_eq!(h.len(), n * v.len());
    let m = v.len();
    // u = kᵀ h
    let mut u = vec![T::zero(); m];
    if g.erase != T::zero() {
        for (i, &ki) in k.iter().enumerate() {
            for (uj, &hij) in u.iter_mut().zip(&h[i * m..(i + 1) * m]) {
                *uj = *uj + ki * hij;
            }
        }
    }
    for i in 0..n {
        let ek = g.erase * k[i];
        let wk = g.write * k[i];
        for j in 0..m {
            let hij = &mut h[i * m + j];
            *hij = g.decay * (*hij - ek * u[j]) + wk * v[j];
        }
    }
}

/// Unit-L2 copy of `k` (with a tiny epsilon so zero keys stay zero).
pub fn normalize_key<T: Real>(k: &[T]) -> Vec<T> {
    let inv = T::one() / (k.iter().map(|&x| x * x).sum::<T>() + r(KEY_NORM_EPS)).sqrt();
    k.iter().map(|&x| x * inv).collect()
}

fn absorb<T: Real>(
    state: &mut CompressedState<T>,
    pair: &EvictedPair<T>,
    params: &AhnParams<T>,
    gates: &[StepGates<T>],
    normalize: bool,
) -> Result<()> {
    let hd = params.head_dim;
    let group = params.n_heads / params.n_kv_heads;
    if pair.k.len() != params.n_kv_heads * hd || pair.v.len() != pair.k.len() {
        return Err(Error::dim("memory update", &[pair.k.len()], &[params.n_kv_heads * hd]));
    }
    if state.heads() != params.n_heads || state.head_dim() != hd {
        return Err(Error::dim(
            "memory update",
            &[state.heads(), state.head_dim()],
            &[params.n_heads, hd],
        ));
    }
    for g in gates {
        g.check()?;
    }
    for (head, &gate) in gates.iter().enumerate() {
        let kvh = head / group;
        let k = &pair.k[kvh * hd..(kvh + 1) * hd];
        let v = &pair.v[kvh * hd..(kvh + 1) * hd];
        let k = if normalize { normalize_key(k) } else { k.to_vec() };
        step_head(state.head_mut(head), &k, v, gate);
    }
    state.advance();
    Ok(())
}

/// Gated delta rule: `h' = α(x)(I − β(x) kᵀk) h + β(x) kᵀv` with normalised `k`.
pub fn gdn_update<T: Real>(
    h: &CompressedState<T>,
    p: &EvictedPair<T>,
    params: &AhnParams<T>,
) -> Result<CompressedState<T>> {
    let alpha = params.gate_values("alpha", &p.x)?;
    let beta = params.gate_values("beta", &p.x)?;
    let gates: Vec<_> = alpha.iter().zip(&beta).map(|(&a, &b)| StepGates::gdn(a, b)).collect();
    let mut out = h.clone();
    absorb(&mut out, p, params, &gates, true)?;
    Ok(out)
}

/// Delta rule: `h' = (I − β(x) kᵀk) h + β(x) kᵀv` with normalised `k`.
pub fn dn_update<T: Real>(
    h: &CompressedState<T>,
    p: &EvictedPair<T>,
    params: &AhnParams<T>,
) -> Result<CompressedState<T>> {
    let beta = params.gate_values("beta", &p.x)?;
    let gates: Vec<_> = beta.iter().map(|&b| StepGates::dn(b)).collect();
    let mut out = h.clone();
    absorb(&mut out, p, params, &gates, true)?;
    Ok(out)
}

/// Scalar-decay accumulate: `h' = exp(−Δ(x)·A) h + Δ(x) kᵀv`.
pub fn mamba2_update<T: Real>(
    h: &CompressedState<T>,
    p: &EvictedPair<T>,
    params: &AhnParams<T>,
) -> Result<CompressedState<T>> {
    let delta = params.gate_values("delta", &p.x)?;
    let a = params.decay_rates()?;
    let gates: Vec<_> = delta.iter().zip(&a).map(|(&d, &a)| StepGates::mamba2(d, a)).collect();
    let mut out = h.clone();
    absorb(&mut out, p, params, &gates, false)?;
    Ok(out)
}

/// Dispatches to the update rule of `params.variant`, in place.
pub fn update_in_place<T: Real>(
    state: &mut CompressedState<T>,
    p: &EvictedPair<T>,
    params: &AhnParams<T>,
) -> Result<()> {
    let gates = params.step_gates(&p.x)?;
    absorb(state, p, params, &gates, params.variant.normalizes_keys())
}

/// `y = γ(x_t) · q h W_o` per query head; `q` is `[n_heads · head_dim]`.
pub fn ahn_readout<T: Real>(q: &[T], h: &CompressedState<T>, x_t: &[T], params: &AhnParams<T>) -> Result<Vec<T>> {
    let hd = params.head_dim;
    if q.len() != params.n_heads * hd {
        return Err(Error::dim("ahn_readout", &[q.len()], &[params.n_heads * hd]));
    }
    let gamma = params.gate_values("gamma", x_t)?;
    let mut out = vec![T::zero(); q.len()];
    let mut read = vec![T::zero(); hd];
    for head in 0..params.n_heads {
        gemm_into(
            &q[head * hd..(head + 1) * hd],
            1,
            hd,
            false,
            h.head(head),
            hd,
            hd,
            false,
            &mut read,
            false,
        );
        read.iter_mut().for_each(|x| *x = *x * gamma[head]);
        let wo = params.w_out_head(head);
        gemm_into(
            &read,
            1,
            hd,
            false,
            wo,
            hd,
            hd,
            false,
            &mut out[head * hd..(head + 1) * hd],
            false,
        );
    }
    Ok(out)
}

/// Sums memory and attention outputs in per-head space.
pub fn mix<T: Real>(y_ahn: &[T], y_attn: &[T]) -> Result<Vec<T>> {
    if y_ahn.len() != y_attn.len() {
        return Err(Error::dim("mix", &[y_ahn.len()], &[y_attn.len()]));
    }
    Ok(y_ahn.iter().zip(y_attn).map(|(&a, &b)| a + b).collect())
}

impl AhnVariant {
    pub fn normalizes_keys(self) -> bool {
        !matches!(self, AhnVariant::Mamba2)
    }
}
