//! Whole-sequence memory scans.
//!
//! Every update is affine in the memory, `h ↦ M h + B`, so a run of updates
//! composes into a single pair `(M, B)`. [`chunk_scan`] builds one pair per
//! chunk in parallel and then applies the pairs in order. [`AhnScanOp`] is the
//! training-time scan: it records every intermediate memory so the backward
//! pass can run the recurrence in reverse.

use rayon::prelude::*;

use super::params::AhnParams;
use super::state::CompressedState;
use super::update::{normalize_key, step_head, update_in_place, StepGates};
use crate::attention::EvictedPair;
use crate::error::{Error, Result};
use crate::numerics::{gemm_into, CustomOp, Real, Tape, Tensor, Var};

pub const DEFAULT_CHUNK: usize = 64;

fn check_order<T>(pairs: &[EvictedPair<T>]) -> Result<()> {
    for w in pairs.windows(2) {
        if w[1].pos <= w[0].pos {
            return Err(Error::Ordering {
                pos: w[1].pos,
                last: w[0].pos,
            });
        }
    }
    Ok(())
}

/// Reference fold: absorbs `pairs` one at a time.
pub fn sequential_scan<T: Real>(
    pairs: &[EvictedPair<T>],
    h0: &CompressedState<T>,
    params: &AhnParams<T>,
) -> Result<CompressedState<T>> {
    check_order(pairs)?;
    let mut h = h0.clone();
    for p in pairs {
        update_in_place(&mut h, p, params)?;
    }
    Ok(h)
}

struct Prepared<T> {
    gates: Vec<StepGates<T>>,
    k: Vec<T>,
}

/// Chunked scan equal to [`sequential_scan`] up to rounding.
pub fn chunk_scan<T: Real>(
    pairs: &[EvictedPair<T>],
    h0: &CompressedState<T>,
    params: &AhnParams<T>,
    chunk: usize,
) -> Result<CompressedState<T>> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    check_order(pairs)?;
    let hd = params.head_dim;
    let kvw = params.n_kv_heads * hd;
    if h0.heads() != params.n_heads || h0.head_dim() != hd {
        return Err(Error::dim(
            "chunk_scan",
            &[h0.heads(), h0.head_dim()],
            &[params.n_heads, hd],
        ));
    }
    let prepared = pairs
        .iter()
        .map(|p| {
            if p.k.len() != kvw || p.v.len() != kvw {
                return Err(Error::dim("chunk_scan", &[p.k.len()], &[kvw]));
            }
            let gates = params.step_gates(&p.x)?;
            if gates
                .iter()
                .any(|g| !(g.decay.is_finite() && g.erase.is_finite() && g.write.is_finite()))
            {
                return Err(Error::NonFinite("memory gate".into()));
            }
            let k = if params.variant.normalizes_keys() {
                p.k.chunks_exact(hd).flat_map(normalize_key).collect()
            } else {
                p.k.clone()
            };
            Ok(Prepared { gates, k })
        })
        .collect::<Result<Vec<_>>>()?;

    let group = params.n_heads / params.n_kv_heads;
    let n_chunks = pairs.len().div_ceil(chunk);
    let jobs: Vec<(usize, usize)> = (0..params.n_heads)
        .flat_map(|g| (0..n_chunks).map(move |c| (g, c)))
        .collect();
    let composed: Vec<(Vec<T>, Vec<T>)> = jobs
        .par_iter()
        .map(|&(head, c)| {
            let kvh = head / group;
            let mut m = Tensor::<T>::eye(hd).into_data();
            let mut b = vec![T::zero(); hd * hd];
            for idx in c * chunk..((c + 1) * chunk).min(pairs.len()) {
                let gate = prepared[idx].gates[head];
                let k = &prepared[idx].k[kvh * hd..(kvh + 1) * hd];
                let v = &pairs[idx].v[kvh * hd..(kvh + 1) * hd];
                step_head(
                    &mut m,
                    k,
                    v,
                    StepGates {
                        write: T::zero(),
                        ..gate
                    },
                );
                step_head(&mut b, k, v, gate);
            }
            (m, b)
        })
        .collect();

    let mut out = h0.clone();
    let mut tmp = vec![T::zero(); hd * hd];
    for head in 0..params.n_heads {
        for c in 0..n_chunks {
            let (m, b) = &composed[head * n_chunks + c];
            tmp.copy_from_slice(b);
            gemm_into(m, hd, hd, false, out.head(head), hd, hd, false, &mut tmp, true);
            out.head_mut(head).copy_from_slice(&tmp);
        }
    }
    for _ in pairs {
        out.advance();
    }
    Ok(out)
}

/// Geometry of a training-time scan over one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanSpec {
    pub sinks: usize,
    pub window: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl ScanSpec {
    /// First position whose memory is non-empty.
    pub fn first_read(&self) -> usize {
        self.sinks + self.window
    }
}

/// Memory read-out `r_t = q_t h_t` for every position of a sequence.
///
/// At position `t ≥ sinks + window` the memory has absorbed the pairs at
/// positions `sinks ..= t − window`, i.e. every token that has left the window.
/// Inputs are `q, k, v` as `[L, heads · head_dim]` (one block per query head,
/// keys already normalised where the variant requires it) and the per-head
/// coefficients `decay, erase, write` as `[L, heads]`.
pub struct AhnScanOp<T> {
    spec: ScanSpec,
    /// Memory after each absorbed step, per head.
    states: Vec<Vec<T>>,
}

type Inputs<'a, T> = [&'a Tensor<T>; 6];

fn check_inputs<T: Real>(spec: &ScanSpec, inputs: &Inputs<'_, T>) -> Result<usize> {
    let len = inputs[0].rows();
    let width = spec.heads * spec.head_dim;
    for t in &inputs[..3] {
        if t.dims2() != (len, width) {
            return Err(Error::dim("ahn_scan", t.shape(), &[len, width]));
        }
    }
    for t in &inputs[3..] {
        if t.dims2() != (len, spec.heads) {
            return Err(Error::dim("ahn_scan", t.shape(), &[len, spec.heads]));
        }
    }
    Ok(len)
}

impl<T: Real> AhnScanOp<T> {
    /// Runs the scan, returning the op (holding the recorded states) and the read-out.
    pub fn forward(spec: ScanSpec, inputs: Inputs<'_, T>) -> Result<(Self, Tensor<T>)> {
        let len = check_inputs(&spec, &inputs)?;
        let [q, k, v, decay, erase, write] = inputs;
        let hd = spec.head_dim;
        let hh = hd * hd;
        let start = spec.first_read();
        let steps = len.saturating_sub(start);
        let per_head: Vec<(Vec<T>, Vec<T>)> = (0..spec.heads)
            .into_par_iter()
            .map(|g| {
                let cols = g * hd..(g + 1) * hd;
                let mut states = Vec::with_capacity(steps * hh);
                let mut h = vec![T::zero(); hh];
                let mut read = vec![T::zero(); steps * hd];
                for i in 0..steps {
                    let j = spec.sinks + i;
                    let gate = StepGates {
                        decay: decay.at(j, g),
                        erase: erase.at(j, g),
                        write: write.at(j, g),
                    };
                    step_head(&mut h, &k.row(j)[cols.clone()], &v.row(j)[cols.clone()], gate);
                    states.extend_from_slice(&h);
                    let qt = &q.row(start + i)[cols.clone()];
                    gemm_into(
                        qt,
                        1,
                        hd,
                        false,
                        &h,
                        hd,
                        hd,
                        false,
                        &mut read[i * hd..(i + 1) * hd],
                        false,
                    );
                }
                (states, read)
            })
            .collect();
        let width = spec.heads * hd;
        let mut out = Tensor::zeros(&[len, width]);
        let mut states = Vec::with_capacity(spec.heads);
        for (g, (s, read)) in per_head.into_iter().enumerate() {
            for i in 0..steps {
                out.row_mut(start + i)[g * hd..(g + 1) * hd].copy_from_slice(&read[i * hd..(i + 1) * hd]);
            }
            states.push(s);
        }
        Ok((AhnScanOp { spec, states }, out))
    }

    /// Records the scan on `tape` and returns the read-out variable.
    pub fn record(tape: &mut Tape<T>, spec: ScanSpec, inputs: [Var; 6]) -> Result<Var> {
        let (op, out) = {
            let vals = inputs.map(|v| tape.value(v));
            Self::forward(spec, vals)?
        };
        Ok(tape.custom(&inputs, out, Box::new(op)))
    }
}

struct HeadGrads<T> {
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
    dgate: Vec<[T; 3]>,
}

impl<T: Real> CustomOp<T> for AhnScanOp<T> {
    fn name(&self) -> &'static str {
        "ahn_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let inputs: Inputs<'_, T> = inputs
            .try_into()
            .map_err(|_| Error::dim("ahn_scan", &[inputs.len()], &[6]))?;
        let spec = self.spec;
        let len = check_inputs(&spec, &inputs)?;
        let [q, k, v, decay, erase, write] = inputs;
        let hd = spec.head_dim;
        let hh = hd * hd;
        let start = spec.first_read();
        let steps = len.saturating_sub(start);
        let zero = vec![T::zero(); hh];

        let per_head: Vec<HeadGrads<T>> = (0..spec.heads)
            .into_par_iter()
            .map(|g| {
                let cols = g * hd..(g + 1) * hd;
                let states = &self.states[g];
                let mut out = HeadGrads {
                    dq: vec![T::zero(); steps * hd],
                    dk: vec![T::zero(); steps * hd],
                    dv: vec![T::zero(); steps * hd],
                    dgate: vec![[T::zero(); 3]; steps],
                };
                // dL/dh for the memory after the current step.
                let mut gm = vec![T::zero(); hh];
                let (mut c, mut u, mut gu, mut hc, mut gv) = (
                    vec![T::zero(); hd],
                    vec![T::zero(); hd],
                    vec![T::zero(); hd],
                    vec![T::zero(); hd],
                    vec![T::zero(); hd],
                );
                for i in (0..steps).rev() {
                    let t = start + i;
                    let j = spec.sinks + i;
                    let ht = &states[i * hh..(i + 1) * hh];
                    let dr = &grad.row(t)[cols.clone()];
                    let qt = &q.row(t)[cols.clone()];
                    // Read-out r = qᵀh: dq = h dr, dh += q drᵀ.
                    gemm_into(
                        ht,
                        hd,
                        hd,
                        false,
                        dr,
                        hd,
                        1,
                        false,
                        &mut out.dq[i * hd..(i + 1) * hd],
                        false,
                    );
                    for a in 0..hd {
                        for b in 0..hd {
                            gm[a * hd + b] = gm[a * hd + b] + qt[a] * dr[b];
                        }
                    }
                    let hp = if i == 0 {
                        &zero[..]
                    } else {
                        &states[(i - 1) * hh..i * hh]
                    };
                    let (d, e, w) = (decay.at(j, g), erase.at(j, g), write.at(j, g));
                    let kj = &k.row(j)[cols.clone()];
                    let vj = &v.row(j)[cols.clone()];
                    gemm_into(kj, 1, hd, false, &gm, hd, hd, false, &mut c, false);
                    gemm_into(kj, 1, hd, false, hp, hd, hd, false, &mut u, false);
                    gemm_into(&gm, hd, hd, false, &u, hd, 1, false, &mut gu, false);
                    gemm_into(hp, hd, hd, false, &c, hd, 1, false, &mut hc, false);
                    gemm_into(&gm, hd, hd, false, vj, hd, 1, false, &mut gv, false);
                    let cu: T = c.iter().zip(&u).map(|(&a, &b)| a * b).sum();
                    let gh: T = gm.iter().zip(hp).map(|(&a, &b)| a * b).sum();
                    let cv: T = c.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    out.dgate[i] = [gh - e * cu, -(d * cu), cv];
                    let dst_v = &mut out.dv[i * hd..(i + 1) * hd];
                    for (o, &cb) in dst_v.iter_mut().zip(&c) {
                        *o = w * cb;
                    }
                    let de_k = d * e;
                    let dst_k = &mut out.dk[i * hd..(i + 1) * hd];
                    for a in 0..hd {
                        dst_k[a] = w * gv[a] - de_k * (gu[a] + hc[a]);
                    }
                    for a in 0..hd {
                        let ek = e * kj[a];
                        for b in 0..hd {
                            let x = &mut gm[a * hd + b];
                            *x = d * (*x - ek * c[b]);
                        }
                    }
                }
                out
            })
            .collect();

        let width = spec.heads * hd;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; 6];
        let scatter = |pick: &dyn Fn(&HeadGrads<T>) -> &Vec<T>, offset: usize| {
            let mut t = Tensor::zeros(&[len, width]);
            for (g, hg) in per_head.iter().enumerate() {
                let src = pick(hg);
                for i in 0..steps {
                    t.row_mut(offset + i)[g * hd..(g + 1) * hd].copy_from_slice(&src[i * hd..(i + 1) * hd]);
                }
            }
            t
        };
        if needs[0] {
            grads[0] = Some(scatter(&|h| &h.dq, start));
        }
        if needs[1] {
            grads[1] = Some(scatter(&|h| &h.dk, spec.sinks));
        }
        if needs[2] {
            grads[2] = Some(scatter(&|h| &h.dv, spec.sinks));
        }
        for (slot, gate_grad) in grads[3..].iter_mut().enumerate() {
            if !needs[3 + slot] {
                continue;
            }
            let mut t = Tensor::zeros(&[len, spec.heads]);
            for (g, hg) in per_head.iter().enumerate() {
                for i in 0..steps {
                    t.set(spec.sinks + i, g, hg.dgate[i][slot]);
                }
            }
            *gate_grad = Some(t);
        }
        Ok(grads)
    }
}
