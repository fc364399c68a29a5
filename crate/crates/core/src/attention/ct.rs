//! Compressive-transformer baseline: evicted pairs are pooled `rate` at a time
//! into extra attention slots held in a FIFO of fixed capacity.

use super::config::{AttentionConfig, Pool};
use super::kv::{EvictedPair, Ring};
use crate::error::{Error, Result};
use crate::numerics::{r, CustomOp, Real, Tape, Tensor, Var};

/// Pools equal-width rows coordinatewise.
pub fn pool_rows<T: Real>(rows: &[&[T]], pool: Pool) -> Result<Vec<T>> {
    let first = rows.first().ok_or(Error::Empty("pool_rows"))?;
    let mut out = first.to_vec();
    for row in &rows[1..] {
        if row.len() != out.len() {
            return Err(Error::dim("pool_rows", &[row.len()], &[out.len()]));
        }
        for (o, &x) in out.iter_mut().zip(row.iter()) {
            *o = match pool {
                Pool::Max => o.max(x),
                Pool::Avg => *o + x,
            };
        }
    }
    if pool == Pool::Avg {
        let n: T = r(rows.len() as f64);
        out.iter_mut().for_each(|o| *o = *o / n);
    }
    Ok(out)
}

/// Pooled slot count whose cache matches an `H × H` memory per query head.
pub fn ct_slots(cfg: &AttentionConfig) -> usize {
    (cfg.head_dim * cfg.n_q_heads).div_ceil(2 * cfg.n_kv_heads)
}

/// Streaming pooled memory of one layer.
#[derive(Clone, Debug)]
pub struct CtMemory<T> {
    rate: usize,
    pool: Pool,
    pending_k: Vec<Vec<T>>,
    pending_v: Vec<Vec<T>>,
    slots_k: Ring<T>,
    slots_v: Ring<T>,
}

impl<T: Real> CtMemory<T> {
    pub fn new(rate: usize, capacity: usize, pool: Pool, kv_width: usize) -> Result<Self> {
        if rate == 0 || capacity == 0 {
            return Err(Error::Config(
                "compression rate and slot capacity must be positive".into(),
            ));
        }
        Ok(CtMemory {
            rate,
            pool,
            pending_k: Vec::with_capacity(rate),
            pending_v: Vec::with_capacity(rate),
            slots_k: Ring::new(kv_width, Some(capacity)),
            slots_v: Ring::new(kv_width, Some(capacity)),
        })
    }

    /// Buffers an evicted pair; every `rate`-th call emits one pooled slot.
    pub fn push(&mut self, pair: &EvictedPair<T>) -> Result<()> {
        self.pending_k.push(pair.k.clone());
        self.pending_v.push(pair.v.clone());
        if self.pending_k.len() == self.rate {
            let k: Vec<&[T]> = self.pending_k.iter().map(Vec::as_slice).collect();
            let v: Vec<&[T]> = self.pending_v.iter().map(Vec::as_slice).collect();
            let (pk, pv) = (pool_rows(&k, self.pool)?, pool_rows(&v, self.pool)?);
            self.slots_k.push(&pk);
            self.slots_v.push(&pv);
            self.pending_k.clear();
            self.pending_v.clear();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots_k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key_segments(&self) -> Vec<&[T]> {
        self.slots_k.segments().collect()
    }

    pub fn value_segments(&self) -> Vec<&[T]> {
        self.slots_v.segments().collect()
    }
}

/// Pools consecutive evicted pairs into slots: each output holds `(k, v)` of one group.
pub fn ct_compress<T: Real>(evicted: &[EvictedPair<T>], rate: usize, pool: Pool) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    if rate == 0 {
        return Err(Error::Config("compression rate must be at least 1".into()));
    }
    evicted
        .chunks_exact(rate)
        .map(|group| {
            let k: Vec<&[T]> = group.iter().map(|p| p.k.as_slice()).collect();
            let v: Vec<&[T]> = group.iter().map(|p| p.v.as_slice()).collect();
            Ok((pool_rows(&k, pool)?, pool_rows(&v, pool)?))
        })
        .collect()
}

/// Groups of `rate` rows starting at row `start`, pooled on a tape.
struct PoolRowsOp {
    start: usize,
    rate: usize,
    pool: Pool,
    /// For max pooling, the source row of each output element.
    argmax: Vec<usize>,
}

/// Pools rows `start + g·rate .. start + (g+1)·rate` of `x` for `groups` groups.
pub fn pool_rows_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    start: usize,
    rate: usize,
    groups: usize,
    pool: Pool,
) -> Result<Var> {
    let src = tape.value(x);
    let (m, w) = src.dims2();
    if rate == 0 || groups == 0 || start + groups * rate > m {
        return Err(Error::dim("pool_rows", src.shape(), &[start, rate, groups]));
    }
    let mut out = vec![T::zero(); groups * w];
    let mut argmax = Vec::new();
    for g in 0..groups {
        let base = start + g * rate;
        let dst = &mut out[g * w..(g + 1) * w];
        match pool {
            Pool::Avg => {
                for i in 0..rate {
                    for (o, &v) in dst.iter_mut().zip(src.row(base + i)) {
                        *o = *o + v;
                    }
                }
                let n: T = r(rate as f64);
                dst.iter_mut().for_each(|o| *o = *o / n);
            }
            Pool::Max => {
                for c in 0..w {
                    let mut best = base;
                    for i in 1..rate {
                        if src.at(base + i, c) > src.at(best, c) {
                            best = base + i;
                        }
                    }
                    dst[c] = src.at(best, c);
                    argmax.push(best);
                }
            }
        }
    }
    let value = Tensor::new(&[groups, w], out)?;
    let op = PoolRowsOp {
        start,
        rate,
        pool,
        argmax,
    };
    Ok(tape.custom(&[x], value, Box::new(op)))
}

impl<T: Real> CustomOp<T> for PoolRowsOp {
    fn name(&self) -> &'static str {
        "pool_rows"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let (groups, w) = grad.dims2();
        let inv: T = r(1.0 / self.rate as f64);
        for g in 0..groups {
            for c in 0..w {
                let gv = grad.at(g, c);
                match self.pool {
                    Pool::Avg => {
                        for i in 0..self.rate {
                            let row = self.start + g * self.rate + i;
                            dx.set(row, c, dx.at(row, c) + gv * inv);
                        }
                    }
                    Pool::Max => {
                        let row = self.argmax[g * w + c];
                        dx.set(row, c, dx.at(row, c) + gv);
                    }
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}
