use rayon::prelude::*;

use super::loss::kl_loss;
use crate::attention::MixerMode;
use crate::error::{Error, Result};
use crate::model::{Mixer, Model};
use crate::numerics::{Real, Tensor};

/// Held-out metrics of one mixer against the full-attention teacher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub mode: MixerMode,
    pub sinks: usize,
    pub window: usize,
    /// Mean KL(teacher ‖ model) over every position.
    pub kl: f64,
    pub ppl: f64,
    /// Perplexity over positions at or past `sinks + window` (the model's configured
    /// span for full attention); NaN when there are none.
    pub ppl_beyond: f64,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "mode,sinks,window,kl,ppl,ppl_beyond";

    pub fn csv(&self) -> String {
        let w = if self.mode.is_windowed() {
            self.window.to_string()
        } else {
            "all".into()
        };
        format!(
            "{},{},{w},{:.6},{:.6},{:.6}",
            self.mode, self.sinks, self.kl, self.ppl, self.ppl_beyond
        )
    }
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EvalRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Negative log-likelihood of each target, as f64.
fn nll_rows<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Vec<f64> {
    (0..targets.len())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[targets[i]]
        })
        .collect()
}

struct SeqEval<T> {
    teacher: Tensor<T>,
}

/// Evaluates each mixer on `sequences` (inputs are all tokens but the last,
/// targets all but the first). The teacher runs once per sequence.
pub fn evaluate_modes<T: Real>(model: &Model<T>, sequences: &[Vec<usize>], mixers: &[Mixer]) -> Result<Vec<EvalRow>> {
    if sequences.is_empty() || sequences.iter().any(|s| s.len() < 2) {
        return Err(Error::Empty("evaluation corpus"));
    }
    let teachers: Vec<SeqEval<T>> = sequences
        .par_iter()
        .map(|s| {
            Ok(SeqEval {
                teacher: model.forward(&s[..s.len() - 1], &Mixer::full())?,
            })
        })
        .collect::<Result<_>>()?;
    mixers
        .iter()
        .map(|mixer| {
            let per_seq: Vec<(f64, Vec<f64>)> = sequences
                .par_iter()
                .zip(&teachers)
                .map(|(s, t)| {
                    let logits = model.forward(&s[..s.len() - 1], mixer)?;
                    let kl = kl_loss(&t.teacher, &logits)?.to_f64().unwrap_or(f64::NAN);
                    Ok((kl, nll_rows(&logits, &s[1..])))
                })
                .collect::<Result<_>>()?;
            // Full attention is scored over the positions the configured window would miss.
            let span = if mixer.mode.is_windowed() {
                mixer.sinks + mixer.window
            } else {
                model.cfg.sinks + model.cfg.window
            };
            let kl = per_seq.iter().map(|(k, _)| k).sum::<f64>() / per_seq.len() as f64;
            let (mut all, mut n_all, mut beyond, mut n_beyond) = (0.0, 0usize, 0.0, 0usize);
            for (_, nll) in &per_seq {
                for (t, &x) in nll.iter().enumerate() {
                    all += x;
                    n_all += 1;
                    if t >= span {
                        beyond += x;
                        n_beyond += 1;
                    }
                }
            }
            Ok(EvalRow {
                mode: mixer.mode,
                sinks: mixer.sinks,
                window: mixer.window,
                kl,
                ppl: (all / n_all as f64).exp(),
                ppl_beyond: if n_beyond == 0 {
                    f64::NAN
                } else {
                    (beyond / n_beyond as f64).exp()
                },
            })
        })
        .collect()
}

/// Memory-mode metrics at each window, with the model's configured sink count.
pub fn evaluate_distill<T: Real>(
    model: &Model<T>,
    sequences: &[Vec<usize>],
    windows: &[usize],
) -> Result<Vec<EvalRow>> {
    let mixers: Vec<Mixer> = windows
        .iter()
        .map(|&window| Mixer {
            mode: model.cfg.mixer_mode,
            sinks: model.cfg.sinks,
            window,
        })
        .collect();
    evaluate_modes(model, sequences, &mixers)
}
