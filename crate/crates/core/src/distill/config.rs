use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kvtext::KvText;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// KL(teacher ‖ student) against the full-attention teacher.
    Kl,
    /// Next-token cross-entropy on the data, ignoring the teacher.
    Ce,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Kl => "kl",
            Objective::Ce => "ce",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Objective::Kl),
            "ce" => Ok(Objective::Ce),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

/// Draws a size per batch. Written as `64` or `32..96` (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Fixed(usize),
    RandomRange(usize, usize),
}

impl Sampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match *self {
            Sampler::Fixed(v) => v,
            Sampler::RandomRange(lo, hi) => rng.gen_range(lo..=hi),
        }
    }

    pub fn max(&self) -> usize {
        match *self {
            Sampler::Fixed(v) | Sampler::RandomRange(_, v) => v,
        }
    }

    pub fn min(&self) -> usize {
        match *self {
            Sampler::Fixed(v) | Sampler::RandomRange(v, _) => v,
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::Fixed(v) => write!(f, "{v}"),
            Sampler::RandomRange(lo, hi) => write!(f, "{lo}..{hi}"),
        }
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid sampler `{s}`"));
        match s.split_once("..") {
            None => s.trim().parse().map(Sampler::Fixed).map_err(|_| bad()),
            Some((lo, hi)) => {
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                Ok(Sampler::RandomRange(lo, hi))
            }
        }
    }
}

/// Optimisation settings for pre-training and self-distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub objective: Objective,
    pub window_sampler: Sampler,
    pub sink_sampler: Sampler,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Tokens per training sequence.
    pub seq_len: usize,
    /// Optimizer steps; zero derives the count from `epochs` and the corpus size.
    pub steps: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            objective: Objective::Kl,
            window_sampler: Sampler::Fixed(64),
            sink_sampler: Sampler::Fixed(4),
            lr: 1e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch_size: 4,
            seq_len: 256,
            steps: 0,
            epochs: 1,
            seed: 0,
        }
    }
}

const KEYS: [&str; 12] = [
    "objective",
    "window_sampler",
    "sink_sampler",
    "lr",
    "warmup_frac",
    "weight_decay",
    "grad_clip",
    "batch_size",
    "seq_len",
    "steps",
    "epochs",
    "seed",
];

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail("warmup_frac must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return fail("weight_decay must be >= 0 and grad_clip > 0");
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return fail("batch_size must be positive and seq_len at least 2");
        }
        if self.steps == 0 && self.epochs == 0 {
            return fail("either steps or epochs must be positive");
        }
        if self.window_sampler.min() == 0 {
            return fail("window must be positive");
        }
        Ok(())
    }

    /// Steps to run given `train_bytes` of training text.
    pub fn total_steps(&self, train_bytes: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            (self.epochs * train_bytes / (self.batch_size * self.seq_len)).max(1)
        }
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    pub fn to_kv(&self) -> KvText {
        let mut t = KvText::default();
        t.set("objective", self.objective);
        t.set("window_sampler", self.window_sampler);
        t.set("sink_sampler", self.sink_sampler);
        t.set("lr", self.lr);
        t.set("warmup_frac", self.warmup_frac);
        t.set("weight_decay", self.weight_decay);
        t.set("grad_clip", self.grad_clip);
        t.set("batch_size", self.batch_size);
        t.set("seq_len", self.seq_len);
        t.set("steps", self.steps);
        t.set("epochs", self.epochs);
        t.set("seed", self.seed);
        t
    }

    /// Reads the training keys from `kv`, keeping defaults for absent ones.
    pub fn from_kv(kv: &KvText) -> Result<Self> {
        let d = Self::default();
        let cfg = DistillConfig {
            objective: kv.get("objective")?.unwrap_or(d.objective),
            window_sampler: kv.get("window_sampler")?.unwrap_or(d.window_sampler),
            sink_sampler: kv.get("sink_sampler")?.unwrap_or(d.sink_sampler),
            lr: kv.get("lr")?.unwrap_or(d.lr),
            warmup_frac: kv.get("warmup_frac")?.unwrap_or(d.warmup_frac),
            weight_decay: kv.get("weight_decay")?.unwrap_or(d.weight_decay),
            grad_clip: kv.get("grad_clip")?.unwrap_or(d.grad_clip),
            batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
            seq_len: kv.get("seq_len")?.unwrap_or(d.seq_len),
            steps: kv.get("steps")?.unwrap_or(d.steps),
            epochs: kv.get("epochs")?.unwrap_or(d.epochs),
            seed: kv.get("seed")?.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear warm-up from 0 over the first `⌈warmup_frac · total⌉` steps, then
/// cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_frac: f64) -> f64 {
    let warm = (warmup_frac * total as f64).ceil() as usize;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}
