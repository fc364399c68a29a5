use crate::distill::kl_loss_tape;
use crate::error::{Error, Result};
use crate::model::{Mixer, Model, Trainable};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Gradient magnitude for one out-of-window token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeEntry {
    pub position: usize,
    pub token: usize,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub entries: Vec<ProbeEntry>,
    pub loss: f64,
    /// Largest magnitude, for normalising a rendering.
    pub max: f64,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "position,token,magnitude,quantile";

    /// One row per token; `quantile` is the rank of its magnitude in `[0, 1]`.
    pub fn to_csv(&self) -> String {
        let mut sorted: Vec<f64> = self.entries.iter().map(|e| e.magnitude).collect();
        sorted.sort_by(f64::total_cmp);
        let denom = (sorted.len().max(2) - 1) as f64;
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.entries {
            let rank = sorted.partition_point(|&m| m < e.magnitude);
            out.push_str(&format!(
                "{},{},{:.9e},{:.6}\n",
                e.position,
                e.token,
                e.magnitude,
                rank as f64 / denom
            ));
        }
        out
    }
}

/// KL between the full-attention teacher and the memory student, both run on
/// input embeddings `x`, averaged over the last `window` rows (the tokens
/// still inside the student's final window).
pub fn probe_loss<T: Real>(model: &Model<T>, tape: &mut Tape<T>, x: Var, sinks: usize, window: usize) -> Result<Var> {
    let len = tape.shape(x)[0];
    if len <= sinks + window {
        return Err(Error::EmptyReport {
            len,
            span: sinks + window,
        });
    }
    if !model.cfg.mixer_mode.has_memory() {
        return Err(Error::UnknownMode(format!(
            "{} has no memory to probe",
            model.cfg.mixer_mode
        )));
    }
    let vars = model.register(tape, Trainable::Nothing);
    let teacher = model.forward_embedded(tape, &vars, x, &Mixer::full())?;
    let student_mixer = Mixer {
        mode: model.cfg.mixer_mode,
        sinks,
        window,
    };
    let student = model.forward_embedded(tape, &vars, x, &student_mixer)?;
    let vocab = model.cfg.vocab;
    let last = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
        let t = tape.transpose(y);
        let t = tape.slice_cols(t, len - window, window)?;
        Ok(tape.transpose(t))
    };
    let (t, s) = (last(tape, teacher)?, last(tape, student)?);
    debug_assert_eq!(tape.shape(t), &[window, vocab]);
    kl_loss_tape(tape, t, s)
}

/// Gradient of the probe loss with respect to every out-of-window input
/// embedding, reported as per-token L2 norms for positions `sinks..L−window`.
pub fn grad_probe<T: Real>(model: &Model<T>, tokens: &[usize], sinks: usize, window: usize) -> Result<ProbeReport> {
    let len = tokens.len();
    if len <= sinks + window {
        return Err(Error::EmptyReport {
            len,
            span: sinks + window,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= model.cfg.vocab) {
        return Err(Error::Token {
            token: t,
            vocab: model.cfg.vocab,
        });
    }
    let rows: Vec<Vec<T>> = tokens.iter().map(|&t| model.embed.row(t).to_vec()).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&rows)?, true);
    let loss = probe_loss(model, &mut tape, x, sinks, window)?;
    let grads = tape.backward(loss)?;
    let zero = Tensor::zeros(tape.shape(x));
    let g = grads.get(x).unwrap_or(&zero);
    let entries: Vec<ProbeEntry> = (sinks..len - window)
        .map(|p| ProbeEntry {
            position: p,
            token: tokens[p],
            magnitude: g
                .row(p)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                .sum::<f64>()
                .sqrt(),
        })
        .collect();
    let max = entries.iter().map(|e| e.magnitude).fold(0.0, f64::max);
    Ok(ProbeReport {
        entries,
        loss: tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN),
        max,
    })
}
