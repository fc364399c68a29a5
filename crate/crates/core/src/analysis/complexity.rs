use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dimensions entering the token-mixer cost model. `w` counts sink tokens too.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexitySpec {
    pub l: u64,
    pub w: u64,
    pub d: u64,
    pub h: u64,
    pub n_q: u64,
    pub n_kv: u64,
    pub n_layers: u64,
    pub base_params: f64,
}

impl ComplexitySpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.l, self.w, self.d, self.h, self.n_q, self.n_kv, self.n_layers];
        if dims.contains(&0) || !(self.base_params > 0.0) {
            return Err(Error::Config("complexity dimensions must be positive".into()));
        }
        if self.w > self.l {
            return Err(Error::Config(format!(
                "window {} exceeds sequence length {}",
                self.w, self.l
            )));
        }
        Ok(())
    }

    pub fn with_l(&self, l: u64) -> Self {
        ComplexitySpec { l, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixerKind {
    Full,
    SinksSwa,
    Ahn,
    Ct,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [MixerKind::Full, MixerKind::SinksSwa, MixerKind::Ahn, MixerKind::Ct];
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixerKind::Full => "full",
            MixerKind::SinksSwa => "swa",
            MixerKind::Ahn => "ahn",
            MixerKind::Ct => "ct",
        })
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MixerKind::Full),
            "swa" => Ok(MixerKind::SinksSwa),
            "ahn" => Ok(MixerKind::Ahn),
            "ct" => Ok(MixerKind::Ct),
            _ => Err(Error::UnknownMode(s.to_string())),
        }
    }
}

/// Per-layer costs. Cache and parameters are element counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub params_extra: u128,
    pub flops_mixing: u128,
    pub memory_cache: u128,
}

/// Costs with every term of the cost table kept.
pub fn complexity(spec: &ComplexitySpec, mixer: MixerKind) -> Result<Complexity> {
    complexity_with(spec, mixer, false)
}

/// As [`complexity`]; `omit_minor` drops the memory's `3·D·N_q` and `H²·N_q`
/// terms from the FLOP count, leaving only the dominant attention terms.
pub fn complexity_with(spec: &ComplexitySpec, mixer: MixerKind, omit_minor: bool) -> Result<Complexity> {
    spec.validate()?;
    let (l, w, d, h, nq, nkv) = (
        spec.l as u128,
        spec.w as u128,
        spec.d as u128,
        spec.h as u128,
        spec.n_q as u128,
        spec.n_kv as u128,
    );
    let projections = 4 * l * d * h * (nq + nkv);
    let state = h * h * nq;
    let evicted = l - w;
    let window_flops = projections + 2 * h * nq * w * w + 2 * evicted * 2 * w * h * nq;
    Ok(match mixer {
        MixerKind::Full => Complexity {
            params_extra: 0,
            flops_mixing: projections + 2 * h * nq * l * l,
            memory_cache: 2 * l * h * nkv,
        },
        MixerKind::SinksSwa => Complexity {
            params_extra: 0,
            flops_mixing: window_flops,
            memory_cache: 2 * w * h * nkv,
        },
        MixerKind::Ahn => {
            // Per evicted token: the update and the read-out each touch the
            // H×H state of every query head, plus three gate projections.
            let memory = if omit_minor {
                0
            } else {
                2 * evicted * (2 * state + 3 * d * nq)
            };
            Complexity {
                params_extra: 3 * d * nq + state,
                flops_mixing: window_flops + memory,
                memory_cache: 2 * w * h * nkv + state,
            }
        }
        MixerKind::Ct => {
            // Pooled slots sized so their keys and values match the memory state;
            // every query past the window attends to the full slot budget.
            let slots = ct_slot_budget(spec);
            Complexity {
                params_extra: 0,
                flops_mixing: window_flops + 2 * evicted * 2 * slots * h * nq,
                memory_cache: 2 * w * h * nkv + 2 * slots * h * nkv,
            }
        }
    })
}

/// Compressed slots whose key/value storage equals the `H²·N_q` memory state.
pub fn ct_slot_budget(spec: &ComplexitySpec) -> u128 {
    let (h, nq, nkv) = (spec.h as u128, spec.n_q as u128, spec.n_kv as u128);
    (h * nq).div_ceil(2 * nkv)
}

/// A mixer's costs relative to full attention at the same dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratios {
    /// Extra parameters of all layers over `base_params`.
    pub params: f64,
    pub flops: f64,
    pub cache: f64,
}

pub fn ratios(spec: &ComplexitySpec, mixer: MixerKind) -> Result<Ratios> {
    let full = complexity(spec, MixerKind::Full)?;
    let c = complexity(spec, mixer)?;
    Ok(Ratios {
        params: c.params_extra as f64 * spec.n_layers as f64 / spec.base_params,
        flops: c.flops_mixing as f64 / full.flops_mixing as f64,
        cache: c.memory_cache as f64 / full.memory_cache as f64,
    })
}

/// `L,flops` rows with a header. Sequence lengths shorter than the window
/// are costed with the window shrunk to `L`, where every mixer coincides.
pub fn flop_curve(spec: &ComplexitySpec, mixer: MixerKind, lengths: &[u64]) -> Result<String> {
    let mut out = String::from("L,flops\n");
    for &l in lengths {
        let s = ComplexitySpec {
            l,
            w: spec.w.min(l),
            ..*spec
        };
        out.push_str(&format!("{l},{}\n", complexity(&s, mixer)?.flops_mixing));
    }
    Ok(out)
}

/// Public model-card dimensions of the Qwen2.5 family, used as external inputs.
pub fn preset(name: &str) -> Option<ComplexitySpec> {
    let base = |d, h, n_q, n_kv, n_layers, base_params| ComplexitySpec {
        l: 128_000,
        w: 32_768,
        d,
        h,
        n_q,
        n_kv,
        n_layers,
        base_params,
    };
    match name {
        "qwen3b" => Some(base(2048, 128, 16, 2, 36, 3.09e9)),
        "qwen7b" => Some(base(3584, 128, 28, 4, 28, 7.61e9)),
        "qwen14b" => Some(base(5120, 128, 40, 8, 48, 14.7e9)),
        _ => None,
    }
}
