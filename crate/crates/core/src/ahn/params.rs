use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::update::StepGates;
use super::AhnVariant;
use crate::error::{Error, Result};
use crate::numerics::{gemm_into, r, sigmoid, softplus, Real, Tensor};

/// Layer geometry shared by the memory and the attention it extends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AhnDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

/// Linear gate `act(x · w + b)` producing one scalar per query head.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> Gate<T> {
    fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        let (d, n) = self.w.dims2();
        if x.len() != d {
            return Err(Error::dim("gate", &[x.len()], &[d]));
        }
        // Same kernel and order as the batched path: x·w first, then the bias.
        let mut out = vec![T::zero(); n];
        gemm_into(x, 1, d, false, self.w.data(), d, n, false, &mut out, false);
        for (o, &b) in out.iter_mut().zip(self.b.data()) {
            *o = *o + b;
        }
        Ok(out)
    }
}

/// Trainable parameters of one layer's memory module.
///
/// Only the gates used by `variant` are present: GDN carries `alpha` and
/// `beta`, DN only `beta`, Mamba2 `delta` plus the per-head rate `a_log`.
/// Every variant has the output gate `gamma` and the per-head output
/// projection `w_out` stacked as `[n_heads · head_dim, head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AhnParams<T> {
    pub variant: AhnVariant,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub alpha: Option<Gate<T>>,
    pub beta: Option<Gate<T>>,
    pub delta: Option<Gate<T>>,
    pub a_log: Option<Tensor<T>>,
    pub gamma: Gate<T>,
    pub w_out: Tensor<T>,
}

/// Bias giving a retention of about 0.98 per absorbed token.
const ALPHA_BIAS: f64 = 4.0;
/// Output gate starts nearly closed so the memory branch begins as a small perturbation.
const GAMMA_BIAS: f64 = -4.0;
const GATE_STD: f64 = 0.02;

impl<T: Real> AhnParams<T> {
    pub fn init<R: Rng>(variant: AhnVariant, dims: AhnDims, rng: &mut R) -> Result<Self> {
        let AhnDims {
            d_model,
            n_heads,
            n_kv_heads,
            head_dim,
        } = dims;
        if d_model == 0 || n_heads == 0 || n_kv_heads == 0 || head_dim == 0 || n_heads % n_kv_heads != 0 {
            return Err(Error::Config(format!("invalid memory geometry {dims:?}")));
        }
        let gate = |bias: f64, rng: &mut R| Gate {
            w: Tensor::randn(&[d_model, n_heads], GATE_STD, rng),
            b: Tensor::full(&[1, n_heads], r(bias)),
        };
        let (alpha, beta, delta, a_log) = match variant {
            AhnVariant::Gdn => (Some(gate(ALPHA_BIAS, rng)), Some(gate(0.0, rng)), None, None),
            AhnVariant::Dn => (None, Some(gate(0.0, rng)), None, None),
            AhnVariant::Mamba2 => {
                let mut d = gate(0.0, rng);
                // Step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus.
                let dt = Uniform::new(1e-3f64.ln(), 1e-1f64.ln());
                for b in d.b.data_mut() {
                    let step = dt.sample(rng).exp();
                    *b = r(step.exp_m1().ln());
                }
                let rate = Uniform::new(0.0, 16f64.ln());
                let a: Vec<f64> = (0..n_heads).map(|_| rate.sample(rng)).collect();
                (None, None, Some(d), Some(Tensor::from_f64(&[1, n_heads], &a)?))
            }
        };
        let gamma = Gate {
            w: Tensor::zeros(&[d_model, n_heads]),
            b: Tensor::full(&[1, n_heads], r(GAMMA_BIAS)),
        };
        let eye = Tensor::<T>::eye(head_dim);
        let mut w_out = Vec::with_capacity(n_heads * head_dim * head_dim);
        for _ in 0..n_heads {
            w_out.extend_from_slice(eye.data());
        }
        Ok(AhnParams {
            variant,
            d_model,
            n_heads,
            n_kv_heads,
            head_dim,
            alpha,
            beta,
            delta,
            a_log,
            gamma,
            w_out: Tensor::new(&[n_heads * head_dim, head_dim], w_out)?,
        })
    }

    pub fn dims(&self) -> AhnDims {
        AhnDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
        }
    }

    fn gate(&self, name: &str) -> Result<&Gate<T>> {
        let g = match name {
            "alpha" => self.alpha.as_ref(),
            "beta" => self.beta.as_ref(),
            "delta" => self.delta.as_ref(),
            "gamma" => Some(&self.gamma),
            _ => None,
        };
        g.ok_or_else(|| Error::UnknownArray(format!("{name} gate of {} memory", self.variant)))
    }

    /// Activated gate values (`softplus` for `delta`, `sigmoid` otherwise), one per head.
    pub fn gate_values(&self, name: &str, x: &[T]) -> Result<Vec<T>> {
        let logits = self.gate(name)?.logits(x)?;
        let act: fn(T) -> T = if name == "delta" { softplus } else { sigmoid };
        Ok(logits.into_iter().map(act).collect())
    }

    /// Per-head decay rates `A = exp(a_log)`.
    pub fn decay_rates(&self) -> Result<Vec<T>> {
        let a = self
            .a_log
            .as_ref()
            .ok_or_else(|| Error::UnknownArray(format!("a_log of {} memory", self.variant)))?;
        Ok(a.data().iter().map(|v| v.exp()).collect())
    }

    /// Update coefficients for the token with hidden state `x`.
    pub fn step_gates(&self, x: &[T]) -> Result<Vec<StepGates<T>>> {
        Ok(match self.variant {
            AhnVariant::Gdn => {
                let a = self.gate_values("alpha", x)?;
                let b = self.gate_values("beta", x)?;
                a.iter().zip(&b).map(|(&a, &b)| StepGates::gdn(a, b)).collect()
            }
            AhnVariant::Dn => self.gate_values("beta", x)?.into_iter().map(StepGates::dn).collect(),
            AhnVariant::Mamba2 => {
                let d = self.gate_values("delta", x)?;
                let a = self.decay_rates()?;
                d.iter().zip(&a).map(|(&d, &a)| StepGates::mamba2(d, a)).collect()
            }
        })
    }

    pub fn w_out_head(&self, head: usize) -> &[T] {
        let n = self.head_dim * self.head_dim;
        &self.w_out.data()[head * n..(head + 1) * n]
    }

    /// Named arrays in a fixed order.
    pub fn arrays(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, g) in [("alpha", &self.alpha), ("beta", &self.beta), ("delta", &self.delta)] {
            if let Some(g) = g {
                out.push((w_name(name), &g.w));
                out.push((b_name(name), &g.b));
            }
        }
        if let Some(a) = &self.a_log {
            out.push(("a_log", a));
        }
        out.push(("gamma.w", &self.gamma.w));
        out.push(("gamma.b", &self.gamma.b));
        out.push(("w_out", &self.w_out));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, g) in [
            ("alpha", &mut self.alpha),
            ("beta", &mut self.beta),
            ("delta", &mut self.delta),
        ] {
            if let Some(g) = g {
                out.push((w_name(name), &mut g.w));
                out.push((b_name(name), &mut g.b));
            }
        }
        if let Some(a) = &mut self.a_log {
            out.push(("a_log", a));
        }
        out.push(("gamma.w", &mut self.gamma.w));
        out.push(("gamma.b", &mut self.gamma.b));
        out.push(("w_out", &mut self.w_out));
        out
    }

    /// Parameters excluding biases and `a_log`: the count `3·D·N_q + H²·N_q`
    /// for two-gate variants plus the output gate.
    pub fn weight_count(&self) -> usize {
        self.arrays()
            .iter()
            .filter(|(n, _)| n.ends_with(".w") || *n == "w_out")
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|(_, t)| t.len()).sum()
    }
}

fn w_name(gate: &str) -> &'static str {
    match gate {
        "alpha" => "alpha.w",
        "beta" => "beta.w",
        _ => "delta.w",
    }
}

fn b_name(gate: &str) -> &'static str {
    match gate {
        "alpha" => "alpha.b",
        "beta" => "beta.b",
        _ => "delta.b",
    }
}
