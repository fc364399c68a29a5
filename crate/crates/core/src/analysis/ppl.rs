use crate::error::{Error, Result};
use crate::model::{Mixer, Model};
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PplPoint {
    /// Tokens predicted so far.
    pub position: usize,
    /// `exp` of the mean negative log-likelihood up to `position`.
    pub ppl: f64,
}

/// Running perplexity of next-byte prediction over `text`, decoded token by
/// token with a streaming cache so memory stays bounded for windowed mixers.
/// A point is emitted every `stride` predictions and at the end.
pub fn ppl_curve<T: Real>(model: &Model<T>, text: &[u8], mixer: &Mixer, stride: usize) -> Result<Vec<PplPoint>> {
    if text.len() < 2 {
        return Err(Error::Empty("text"));
    }
    if stride == 0 {
        return Err(Error::Config("report stride must be positive".into()));
    }
    let mut state = model.stream_state(mixer)?;
    let mut total = 0.0;
    let mut out = Vec::new();
    for (i, pair) in text.windows(2).enumerate() {
        let logits = model.stream_step(&mut state, pair[0] as usize)?;
        let row: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[pair[1] as usize];
        let n = i + 1;
        if n % stride == 0 || n == text.len() - 1 {
            out.push(PplPoint {
                position: n,
                ppl: (total / n as f64).exp(),
            });
        }
    }
    Ok(out)
}

/// `mode,position,ppl` rows for several curves.
pub fn ppl_csv(curves: &[(String, Vec<PplPoint>)]) -> String {
    let mut out = String::from("mode,position,ppl\n");
    for (mode, points) in curves {
        for p in points {
            out.push_str(&format!("{mode},{},{:.6}\n", p.position, p.ppl));
        }
    }
    out
}
