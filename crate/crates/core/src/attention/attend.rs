use super::config::AttentionConfig;
use super::kv::KvWindow;
use crate::error::{Error, Result};
use crate::numerics::{gemm_views, r, softmax_rows, BinaryMask, CustomOp, Real, Tape, Tensor, Var, View};

/// Projection weights of one attention layer, stored input-major (`x · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct QkvWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

/// `Q = X W_Q`, `K = X W_K`, `V = X W_V`.
pub fn project_qkv<T: Real>(x: &Tensor<T>, w: &QkvWeights<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((x.matmul(&w.wq)?, x.matmul(&w.wk)?, x.matmul(&w.wv)?))
}

/// Repeats each kv head `group` times so heads line up with query heads.
pub fn expand_kv<T: Real>(kv: &Tensor<T>, head_dim: usize, group: usize) -> Tensor<T> {
    if group == 1 {
        return kv.clone();
    }
    let (m, n) = kv.dims2();
    let mut data = Vec::with_capacity(m * n * group);
    for i in 0..m {
        for head in kv.row(i).chunks_exact(head_dim) {
            for _ in 0..group {
                data.extend_from_slice(head);
            }
        }
    }
    Tensor::new(&[m, n * group], data).expect("expanded shape")
}

/// Masked multi-head attention. `k` and `v` are already expanded to one head per query head.
pub fn attend<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &BinaryMask,
    heads: usize,
    scale: f64,
) -> Result<Tensor<T>> {
    let (lq, width) = q.dims2();
    let lk = k.rows();
    if k.cols() != width || v.cols() != width || v.rows() != lk || width % heads != 0 {
        return Err(Error::dim("attend", q.shape(), k.shape()));
    }
    if mask.rows() != lq || mask.cols() != lk {
        return Err(Error::dim("attend", &[lq, lk], &[mask.rows(), mask.cols()]));
    }
    let h = width / heads;
    let s: T = r(scale);
    let mut out = vec![T::zero(); lq * width];
    for head in 0..heads {
        let qv = View::cols_of(q.data(), width, head * h, h);
        let kv = View::cols_of(k.data(), width, head * h, h);
        let vv = View::cols_of(v.data(), width, head * h, h);
        let mut scores = vec![T::zero(); lq * lk];
        gemm_views(qv, kv.t(), &mut scores, lk, false);
        scores.iter_mut().for_each(|x| *x = *x * s);
        let probs = softmax_rows(&Tensor::new(&[lq, lk], scores)?, Some(mask))?;
        let pv = View::cols_of(probs.data(), lk, 0, lk);
        gemm_views(pv, vv, &mut out[head * h..], width, false);
    }
    Tensor::new(&[lq, width], out)
}

/// One query row (`[n_q_heads · head_dim]`, already rotated) against every cached row.
pub fn attend_cached<T: Real>(q: &[T], cache: &KvWindow<T>, cfg: &AttentionConfig) -> Result<Vec<T>> {
    if cache.kv_width() != cfg.kv_width() {
        return Err(Error::dim("attend_cached", &[cache.kv_width()], &[cfg.kv_width()]));
    }
    attend_segments(q, &cache.key_segments(), &cache.value_segments(), cfg)
}

/// One query row against key/value rows given as `[rows, kv_width]` chunks in
/// position order. Chunks are joined first so every sum runs in a single pass,
/// in the same order as the batched path.
pub fn attend_segments<T: Real>(q: &[T], keys: &[&[T]], values: &[&[T]], cfg: &AttentionConfig) -> Result<Vec<T>> {
    let h = cfg.head_dim;
    let kvw = cfg.kv_width();
    if q.len() != cfg.q_width() {
        return Err(Error::dim("attend_cached", &[q.len()], &[cfg.q_width()]));
    }
    let joined_k;
    let joined_v;
    let (k, v): (&[T], &[T]) = if keys.len() == 1 && values.len() == 1 {
        (keys[0], values[0])
    } else {
        joined_k = keys.concat();
        joined_v = values.concat();
        (&joined_k, &joined_v)
    };
    let n = k.len() / kvw;
    if n == 0 || v.len() != k.len() {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let s: T = r(cfg.scale());
    let mut out = vec![T::zero(); cfg.q_width()];
    let mut scores = vec![T::zero(); n];
    for head in 0..cfg.n_q_heads {
        let kvh = head / cfg.group();
        attend_row(
            View::cols_of(&q[head * h..(head + 1) * h], h, 0, h),
            View::cols_of(k, kvw, kvh * h, h),
            View::cols_of(v, kvw, kvh * h, h),
            s,
            &mut scores,
            &mut out[head * h..(head + 1) * h],
        );
    }
    Ok(out)
}

/// One query row `[1, h]` against `n` key and value rows `[n, h]`. Leaves the
/// attention weights in `probs`. Shared by the streaming and batched sparse
/// paths so both round identically.
fn attend_row<T: Real>(q: View<'_, T>, k: View<'_, T>, v: View<'_, T>, scale: T, probs: &mut [T], out: &mut [T]) {
    let n = k.rows;
    gemm_views(q, k.t(), probs, n, false);
    probs.iter_mut().for_each(|x| *x = *x * scale);
    let max = probs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in probs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    probs.iter_mut().for_each(|x| *x = *x / total);
    gemm_views(View::cols_of(probs, n, 0, n), v, out, out.len(), false);
}

/// Attention that touches only the unmasked columns of each row, in column
/// order. Cost scales with the number of allowed entries rather than `L²`.
struct SparseAttentionOp<T> {
    heads: usize,
    scale: T,
    /// Allowed key columns of each query row.
    cols: Vec<Vec<usize>>,
    /// Attention weights per head and row, aligned with `cols`.
    probs: Vec<Vec<T>>,
}

impl<T: Real> SparseAttentionOp<T> {
    fn forward(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        mask: &BinaryMask,
        heads: usize,
        scale: T,
    ) -> Result<(Self, Tensor<T>)> {
        let (lq, width) = q.dims2();
        let h = width / heads;
        let cols: Vec<Vec<usize>> = (0..lq)
            .map(|i| {
                mask.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        if let Some(row) = cols.iter().position(Vec::is_empty) {
            return Err(Error::DegenerateRow { row });
        }
        let mut out = vec![T::zero(); lq * width];
        let mut probs = Vec::with_capacity(heads * lq);
        let (mut kb, mut vb) = (Vec::new(), Vec::new());
        for head in 0..heads {
            let span = head * h..(head + 1) * h;
            for (i, c) in cols.iter().enumerate() {
                kb.clear();
                vb.clear();
                for &j in c {
                    kb.extend_from_slice(&k.row(j)[span.clone()]);
                    vb.extend_from_slice(&v.row(j)[span.clone()]);
                }
                let mut p = vec![T::zero(); c.len()];
                attend_row(
                    View::cols_of(&q.row(i)[span.clone()], h, 0, h),
                    View::cols_of(&kb, h, 0, h),
                    View::cols_of(&vb, h, 0, h),
                    scale,
                    &mut p,
                    &mut out[i * width + head * h..i * width + (head + 1) * h],
                );
                probs.push(p);
            }
        }
        let op = SparseAttentionOp {
            heads,
            scale,
            cols,
            probs,
        };
        Ok((op, Tensor::new(&[lq, width], out)?))
    }
}

impl<T: Real> CustomOp<T> for SparseAttentionOp<T> {
    fn name(&self) -> &'static str {
        "sparse_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let width = q.cols();
        let h = width / self.heads;
        let lq = self.cols.len();
        let (mut dq, mut dk, mut dv) = (
            Tensor::zeros(q.shape()),
            Tensor::zeros(k.shape()),
            Tensor::zeros(v.shape()),
        );
        for head in 0..self.heads {
            let span = head * h..(head + 1) * h;
            for (i, c) in self.cols.iter().enumerate() {
                let p = &self.probs[head * lq + i];
                let g = &grad.row(i)[span.clone()];
                // dP_j = g · v_j, then the softmax Jacobian.
                let dp: Vec<T> = c.iter().map(|&j| dot(g, &v.row(j)[span.clone()])).collect();
                let mean = p.iter().zip(&dp).fold(T::zero(), |acc, (&pj, &dj)| acc + pj * dj);
                let qi = q.row(i)[span.clone()].to_vec();
                for ((&j, &pj), &dj) in c.iter().zip(p).zip(&dp) {
                    let ds = pj * (dj - mean) * self.scale;
                    let kj = &k.row(j)[span.clone()];
                    for (d, &x) in dq.row_mut(i)[span.clone()].iter_mut().zip(kj) {
                        *d = *d + ds * x;
                    }
                    for (d, &x) in dk.row_mut(j)[span.clone()].iter_mut().zip(&qi) {
                        *d = *d + ds * x;
                    }
                    for (d, &x) in dv.row_mut(j)[span.clone()].iter_mut().zip(g) {
                        *d = *d + pj * x;
                    }
                }
            }
        }
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Tape version of [`attend`]: per-head `softmax(Q Kᵀ · scale, mask) V`.
/// Plain causal masks use dense products; any other mask visits only its
/// allowed columns, matching [`attend_segments`] row for row.
pub fn attend_tape<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &BinaryMask,
    heads: usize,
    scale: f64,
) -> Result<Var> {
    let width = tape.value(q).cols();
    if !width.is_multiple_of(heads) || tape.value(k).cols() != width || tape.value(v).cols() != width {
        return Err(Error::dim("attend_tape", tape.shape(q), tape.shape(k)));
    }
    let (lq, lk) = (tape.value(q).rows(), tape.value(k).rows());
    if mask.rows() != lq || mask.cols() != lk || tape.value(v).rows() != lk {
        return Err(Error::dim("attend_tape", &[lq, lk], &[mask.rows(), mask.cols()]));
    }
    if !mask.is_causal() {
        let (op, out) = SparseAttentionOp::forward(tape.value(q), tape.value(k), tape.value(v), mask, heads, r(scale))?;
        return Ok(tape.custom(&[q, k, v], out, Box::new(op)));
    }
    let h = width / heads;
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * h, h)?;
        let kh = tape.slice_cols(k, head * h, h)?;
        let vh = tape.slice_cols(v, head * h, h)?;
        let scores = tape.matmul_t(qh, false, kh, true)?;
        let scores = tape.scale(scores, r(scale));
        let probs = tape.softmax_rows(scores, Some(mask))?;
        outs.push(tape.matmul(probs, vh)?);
    }
    tape.concat_cols(&outs)
}
