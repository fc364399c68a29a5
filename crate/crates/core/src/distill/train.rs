use std::fmt;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{lr_at, DistillConfig, Objective};
use super::loss::{ce_loss_tape, kl_loss_tape};
use super::optim::{global_norm, AdamW};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::kvtext::KvText;
use crate::model::{Container, Mixer, Model, StoredArray, Trainable};
use crate::numerics::{r, Real, Tape, Tensor};

/// What a [`Trainer`] optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Every base array under next-token cross-entropy with full attention.
    /// Used to obtain a base model in the first place.
    Pretrain,
    /// Memory arrays only; the base stays frozen and doubles as the teacher.
    Distill,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Distill => "distill",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "distill" => Ok(Phase::Distill),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

/// Sequences of `seq_len + 1` tokens plus the attention geometry for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub sinks: usize,
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub window: usize,
    pub sinks: usize,
    /// Before clipping.
    pub grad_norm: f64,
}

impl StepMetrics {
    pub const TSV_HEADER: &'static str = "step\tloss\tlr\twindow\tsinks\tgrad_norm";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6e}\t{}\t{}\t{:.6}",
            self.step, self.loss, self.lr, self.window, self.sinks, self.grad_norm
        )
    }
}

/// Optimizer loop over a [`Model`]. Every step draws its batch and geometry
/// from an RNG keyed by `(seed, step)`, so a resumed run replays exactly.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub cfg: DistillConfig,
    pub phase: Phase,
    pub total: usize,
    pub step: usize,
    opt: AdamW<T>,
    frozen: [u8; 32],
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: DistillConfig, phase: Phase, total: usize) -> Result<Self> {
        cfg.validate()?;
        if total == 0 {
            return Err(Error::Config("total steps must be positive".into()));
        }
        if phase == Phase::Distill && !model.cfg.mixer_mode.has_memory() {
            return Err(Error::Config(format!(
                "distillation needs a memory mixer, got {}",
                model.cfg.mixer_mode
            )));
        }
        let shapes: Vec<Vec<usize>> = trainable(&model, phase).map(|a| a.tensor.shape().to_vec()).collect();
        let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let opt = AdamW::new(&shapes);
        let frozen = model.base_digest();
        Ok(Trainer {
            model,
            cfg,
            phase,
            total,
            step: 0,
            opt,
            frozen,
        })
    }

    /// Names of the arrays this trainer updates.
    pub fn trainable_names(&self) -> Vec<String> {
        trainable(&self.model, self.phase).map(|a| a.name).collect()
    }

    fn rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64);
        rng
    }

    /// The batch for `step`, a pure function of the seed, the step and the corpus.
    pub fn draw(&self, corpus: &Corpus, step: usize) -> Result<Batch> {
        let mut rng = self.rng(step);
        let (sinks, window) = match self.phase {
            Phase::Pretrain => (0, self.cfg.seq_len),
            Phase::Distill => (
                self.cfg.sink_sampler.sample(&mut rng),
                self.cfg.window_sampler.sample(&mut rng),
            ),
        };
        let tokens = (0..self.cfg.batch_size)
            .map(|_| corpus.sample(Split::Train, self.cfg.seq_len + 1, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Batch { tokens, sinks, window })
    }

    pub fn mixer(&self, sinks: usize, window: usize) -> Mixer {
        match self.phase {
            Phase::Pretrain => Mixer::full(),
            Phase::Distill => Mixer {
                mode: self.model.cfg.mixer_mode,
                sinks,
                window,
            },
        }
    }

    pub fn run_step(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        let batch = self.draw(corpus, self.step)?;
        self.train_step(&batch)
    }

    /// Loss and gradients of one sequence, one tensor per [`Trainer::trainable_names`] entry.
    pub fn sequence_gradients(&self, seq: &[usize], mixer: &Mixer) -> Result<(f64, Vec<Tensor<T>>)> {
        if seq.len() < 2 {
            return Err(Error::Empty("training sequence"));
        }
        let (input, targets) = (&seq[..seq.len() - 1], &seq[1..]);
        let model = &self.model;
        let train = match self.phase {
            Phase::Pretrain => Trainable::Everything,
            Phase::Distill => Trainable::Ahn,
        };
        let objective = match self.phase {
            Phase::Pretrain => Objective::Ce,
            Phase::Distill => self.cfg.objective,
        };
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, train);
        let logits = model.forward_tape(&mut tape, &vars, input, mixer)?;
        let loss = match objective {
            Objective::Ce => ce_loss_tape(&mut tape, logits, targets)?,
            Objective::Kl => {
                let teacher = model.forward(input, &Mixer::full())?;
                let teacher = tape.constant(teacher);
                kl_loss_tape(&mut tape, teacher, logits)?
            }
        };
        let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        let mut grads = tape.backward(loss)?;
        let owned = vars
            .ordered()
            .into_iter()
            .zip(model.arrays())
            .filter(|(_, a)| train_on(self.phase, a.ahn));
        let out = owned
            .map(|(v, a)| grads.take(v).unwrap_or_else(|| Tensor::zeros(a.tensor.shape())))
            .collect();
        Ok((value, out))
    }

    /// One optimizer update on `batch`. Members run in parallel on separate
    /// tapes; their gradients are summed in batch order.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        if batch.tokens.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mixer = self.mixer(batch.sinks, batch.window);
        let results: Vec<Result<(f64, Vec<Tensor<T>>)>> = batch
            .tokens
            .par_iter()
            .map(|seq| self.sequence_gradients(seq, &mixer))
            .collect();
        let n = batch.tokens.len() as f64;
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor<T>>> = None;
        for res in results {
            let (l, g) = res?;
            loss += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        loss /= n;
        let mut grads = grads.expect("non-empty batch");
        let inv = r::<T>(1.0 / n);
        for g in &mut grads {
            *g = g.scale(inv);
        }
        let grad_norm = global_norm(&grads);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "training step {} (loss {loss}, grad norm {grad_norm}, sinks {}, window {})",
                self.step, batch.sinks, batch.window
            )));
        }
        if grad_norm > self.cfg.grad_clip {
            let s = r::<T>(self.cfg.grad_clip / grad_norm);
            for g in &mut grads {
                *g = g.scale(s);
            }
        }
        let lr = lr_at(self.step, self.total, self.cfg.lr, self.cfg.warmup_frac);
        let phase = self.phase;
        let mut params: Vec<&mut Tensor<T>> = self
            .model
            .arrays_mut()
            .into_iter()
            .filter(|a| train_on(phase, a.ahn))
            .map(|a| a.tensor)
            .collect();
        self.opt.step(&mut params, &grads, lr, self.cfg.weight_decay)?;
        if phase == Phase::Distill && self.model.base_digest() != self.frozen {
            return Err(Error::Config("frozen base arrays changed during distillation".into()));
        }
        let metrics = StepMetrics {
            step: self.step,
            loss,
            lr,
            window: batch.window,
            sinks: batch.sinks,
            grad_norm,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Optimizer moments, step counters and the training config.
    pub fn state_container(&self) -> Container {
        let mut kv = self.cfg.to_kv();
        kv.set("phase", self.phase);
        kv.set("total", self.total);
        kv.set("step", self.step);
        kv.set("adam_t", self.opt.t);
        let mut arrays = Vec::new();
        for (name, (m, v)) in self.trainable_names().iter().zip(self.opt.m.iter().zip(&self.opt.v)) {
            arrays.push(StoredArray::from_tensor(&format!("m.{name}"), 0, m));
            arrays.push(StoredArray::from_tensor(&format!("v.{name}"), 0, v));
        }
        Container {
            config: kv.to_text(),
            arrays,
        }
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.state_container().save(path)
    }

    /// Rebuilds a trainer from a model and a saved state. The stored training
    /// config replaces `cfg` so the resumed run continues the same schedule.
    pub fn resume(model: Model<T>, state: &Container) -> Result<Self> {
        let kv = KvText::parse(&state.config)?;
        let cfg = DistillConfig::from_kv(&kv)?;
        let phase: Phase = kv.require("phase")?;
        let mut t = Trainer::new(model, cfg, phase, kv.require("total")?)?;
        t.step = kv.require("step")?;
        t.opt.t = kv.require("adam_t")?;
        let names = t.trainable_names();
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [("m.", &mut t.opt.m[i]), ("v.", &mut t.opt.v[i])] {
                let want = format!("{prefix}{name}");
                let stored = state
                    .arrays
                    .iter()
                    .find(|a| a.name == want)
                    .ok_or_else(|| Error::UnknownArray(want.clone()))?;
                let tensor = stored.to_tensor::<T>()?;
                if tensor.shape() != slot.shape() {
                    return Err(Error::dim("resume", tensor.shape(), slot.shape()));
                }
                *slot = tensor;
            }
        }
        Ok(t)
    }

    pub fn load_state(model: Model<T>, path: &Path) -> Result<Self> {
        Self::resume(model, &Container::load(path)?)
    }
}

fn train_on(phase: Phase, ahn: bool) -> bool {
    match phase {
        Phase::Pretrain => !ahn,
        Phase::Distill => ahn,
    }
}

fn trainable<T: Real>(model: &Model<T>, phase: Phase) -> impl Iterator<Item = crate::model::NamedArray<'_, T>> {
    model.arrays().into_iter().filter(move |a| train_on(phase, a.ahn))
}
