//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op computes its forward value eagerly and appends a node. `backward`
//! walks the record from the loss towards the leaves, so the visit order is a
//! reverse topological order and gradient sums are accumulated in a fixed
//! order. The tape itself is never mutated by `backward`.

use std::sync::Arc;

use super::mask::BinaryMask;
use super::real::{r, Real};
use super::tensor::{gemm_into, matmul_t, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op whose forward value is computed outside the tape.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient. Entries for inputs
    /// with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Silu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    RepeatRows(Var),
    RepeatColBlocks {
        a: Var,
        block: usize,
        times: usize,
    },
    RmsNormRows {
        a: Var,
        inv_rms: Vec<T>,
    },
    L2NormBlocks {
        a: Var,
        block: usize,
        inv_norm: Vec<T>,
    },
    Rope {
        a: Var,
        head_dim: usize,
        cos: Arc<Vec<T>>,
        sin: Arc<Vec<T>>,
    },
    Gather {
        table: Var,
        ids: Arc<Vec<usize>>,
    },
    HeadMatmul {
        x: Var,
        w: Var,
        heads: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a forward computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Rotary tables for positions × (head_dim / 2) frequencies.
pub fn rope_tables<T: Real>(positions: &[usize], head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let inv_freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = p as f64 * inv_freq;
            cos.push(r(angle.cos()));
            sin.push(r(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates each `head_dim` block of every row in place; `inverse` undoes the rotation.
pub fn apply_rope<T: Real>(data: &mut [T], cols: usize, head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = head_dim / 2;
    let rows = data.len() / cols;
    for i in 0..rows {
        let c = &cos[i * half..(i + 1) * half];
        let s = &sin[i * half..(i + 1) * half];
        let row = &mut data[i * cols..(i + 1) * cols];
        for head in row.chunks_exact_mut(head_dim) {
            for j in 0..half {
                let x0 = head[j];
                let x1 = head[j + half];
                let sj = if inverse { -s[j] } else { s[j] };
                head[j] = x0 * c[j] - x1 * sj;
                head[j + half] = x1 * c[j] + x0 * sj;
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax with disallowed logits set to −∞ before exponentiation.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, mask: Option<&BinaryMask>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2();
    if let Some(mask) = mask {
        if mask.rows() != m || mask.cols() != n {
            return Err(Error::dim("softmax_rows", x.shape(), &[mask.rows(), mask.cols()]));
        }
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = x.row(i);
        let o = &mut out[i * n..(i + 1) * n];
        let mut max = T::neg_infinity();
        for j in 0..n {
            let z = if mask.is_none_or(|mk| mk.allowed(i, j)) {
                row[j]
            } else {
                T::neg_infinity()
            };
            o[j] = z;
            max = max.max(z);
        }
        if max == T::neg_infinity() {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut total = T::zero();
        for v in o.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in o.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(&[m, n], out)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; used for inference-only forwards.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        let op = if rg { op } else { Op::Leaf };
        self.push(value, op, rg)
    }

    /// Registers a value computed outside the tape together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let inputs = inputs.to_vec();
        let rg = self.any_grad(&inputs);
        let op = if rg { Op::Custom { inputs, op } } else { Op::Leaf };
        self.push(output, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = matmul_t(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push_op(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push_op(value, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        self.push_op(value, Op::Exp(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push_op(value, Op::Softplus(a), &[a])
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push_op(value, Op::Silu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Option<&BinaryMask>) -> Result<Var> {
        let value = softmax_rows(self.value(a), mask)?;
        Ok(self.push_op(value, Op::SoftmaxRows(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push_op(value, Op::Transpose(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        if len == 0 || start + len > cols {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let value = self.value(a).slice_cols(start, len);
        Ok(self.push_op(value, Op::SliceCols { a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let m = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(&[m, total], data)?;
        Ok(self.push_op(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let n = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::dim("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(&[rows, n], data)?;
        Ok(self.push_op(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    /// Expands a single row `[1, n]` to `[times, n]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let src = self.value(a);
        if src.rows() != 1 || times == 0 {
            return Err(Error::dim("repeat_rows", src.shape(), &[times]));
        }
        let n = src.cols();
        let mut data = Vec::with_capacity(times * n);
        for _ in 0..times {
            data.extend_from_slice(src.data());
        }
        let value = Tensor::new(&[times, n], data)?;
        Ok(self.push_op(value, Op::RepeatRows(a), &[a]))
    }

    /// Repeats each consecutive `block`-column group `times` times in place:
    /// `[m, g·block] → [m, g·times·block]`.
    pub fn repeat_col_blocks(&mut self, a: Var, block: usize, times: usize) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.dims2();
        if block == 0 || times == 0 || n % block != 0 {
            return Err(Error::dim("repeat_col_blocks", src.shape(), &[block, times]));
        }
        if times == 1 {
            return Ok(a);
        }
        let mut data = Vec::with_capacity(m * n * times);
        for i in 0..m {
            for chunk in src.row(i).chunks_exact(block) {
                for _ in 0..times {
                    data.extend_from_slice(chunk);
                }
            }
        }
        let value = Tensor::new(&[m, n * times], data)?;
        Ok(self.push_op(value, Op::RepeatColBlocks { a, block, times }, &[a]))
    }

    /// `x / sqrt(mean(x²) + eps)` per row.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let (m, n) = src.dims2();
        let mut out = src.clone();
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = out.row_mut(i);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / r(n as f64);
            let inv = T::one() / (ms + r(eps)).sqrt();
            row.iter_mut().for_each(|v| *v = *v * inv);
            inv_rms.push(inv);
        }
        self.push_op(out, Op::RmsNormRows { a, inv_rms }, &[a])
    }

    /// Unit-L2 normalisation of each `block`-wide group in every row.
    pub fn l2_norm_blocks(&mut self, a: Var, block: usize, eps: f64) -> Result<Var> {
        let src = self.value(a);
        if block == 0 || !src.cols().is_multiple_of(block) {
            return Err(Error::dim("l2_norm_blocks", src.shape(), &[block]));
        }
        let mut out = src.clone();
        let mut inv_norm = Vec::with_capacity(out.len() / block);
        for chunk in out.data_mut().chunks_exact_mut(block) {
            let inv = T::one() / (chunk.iter().map(|&v| v * v).sum::<T>() + r(eps)).sqrt();
            chunk.iter_mut().for_each(|v| *v = *v * inv);
            inv_norm.push(inv);
        }
        Ok(self.push_op(out, Op::L2NormBlocks { a, block, inv_norm }, &[a]))
    }

    /// Rotary position embedding over `head_dim`-wide blocks, one row per position.
    pub fn rope(&mut self, a: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.dims2();
        if positions.len() != m || !head_dim.is_multiple_of(2) || n % head_dim != 0 {
            return Err(Error::dim("rope", src.shape(), &[positions.len(), head_dim]));
        }
        let (cos, sin) = rope_tables::<T>(positions, head_dim, base);
        let mut out = src.clone();
        apply_rope(out.data_mut(), n, head_dim, &cos, &sin, false);
        let op = Op::Rope {
            a,
            head_dim,
            cos: Arc::new(cos),
            sin: Arc::new(sin),
        };
        Ok(self.push_op(out, op, &[a]))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let src = self.value(table);
        let (v, d) = src.dims2();
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Token { token: id, vocab: v });
            }
            data.extend_from_slice(src.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        let op = Op::Gather {
            table,
            ids: Arc::new(ids.to_vec()),
        };
        Ok(self.push_op(value, op, &[table]))
    }

    /// Per-head product: `x[:, g] · w[g]` for `heads` groups, `w` stacked as `[heads·h, h]`.
    pub fn head_matmul(&mut self, x: Var, w: Var, heads: usize) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        let (m, n) = xs.dims2();
        let (wr, h) = ws.dims2();
        if heads == 0 || n != heads * h || wr != heads * h {
            return Err(Error::dim("head_matmul", xs.shape(), ws.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        for g in 0..heads {
            head_gemm(
                xs.data(),
                m,
                n,
                g * h,
                h,
                &ws.data()[g * h * h..(g + 1) * h * h],
                false,
                &mut out,
                g * h,
                false,
            );
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(value, Op::HeadMatmul { x, w, heads }, &[x, w]))
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.needs(a) {
                    let da = if ta {
                        matmul_t(bv, tb, g, true)?
                    } else {
                        matmul_t(g, false, bv, !tb)?
                    };
                    accumulate(grads, a, da)?;
                }
                if self.needs(b) {
                    let db = if tb {
                        matmul_t(g, true, av, ta)?
                    } else {
                        matmul_t(av, !ta, g, false)?
                    };
                    accumulate(grads, b, db)?;
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.needs(b) {
                    accumulate(grads, b, g.clone())?;
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.needs(b) {
                    accumulate(grads, b, g.scale(-T::one()))?;
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.zip_map(self.value(b), "mul", |x, y| x * y)?)?;
                }
                if self.needs(b) {
                    accumulate(grads, b, g.zip_map(self.value(a), "mul", |x, y| x * y)?)?;
                }
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.scale(s))?,
            &Op::Sigmoid(a) => accumulate(grads, a, g.zip_map(y, "sigmoid", |gi, yi| gi * yi * (T::one() - yi))?)?,
            &Op::Exp(a) => accumulate(grads, a, g.zip_map(y, "exp", |gi, yi| gi * yi)?)?,
            &Op::Softplus(a) => accumulate(
                grads,
                a,
                g.zip_map(self.value(a), "softplus", |gi, xi| gi * sigmoid(xi))?,
            )?,
            &Op::Silu(a) => {
                let d = g.zip_map(self.value(a), "silu", |gi, xi| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (T::one() - s))
                })?;
                accumulate(grads, a, d)?
            }
            &Op::SoftmaxRows(a) => {
                let (m, n) = y.dims2();
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, a, Tensor::new(&[m, n], d)?)?
            }
            &Op::Transpose(a) => accumulate(grads, a, g.transpose())?,
            &Op::SliceCols { a, start } => {
                let (m, n) = self.value(a).dims2();
                let len = g.cols();
                let mut d = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    d.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
                }
                accumulate(grads, a, d)?
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        accumulate(grads, p, g.slice_cols(offset, w))?;
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        accumulate(grads, p, g.slice_rows(offset, rows).reshape(self.shape(p))?)?;
                    }
                    offset += rows;
                }
            }
            &Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, a, Tensor::full(self.shape(a), s))?
            }
            &Op::RepeatRows(a) => {
                let n = g.cols();
                let mut d = vec![T::zero(); n];
                for i in 0..g.rows() {
                    for (acc, &v) in d.iter_mut().zip(g.row(i)) {
                        *acc = *acc + v;
                    }
                }
                accumulate(grads, a, Tensor::new(self.shape(a), d)?)?
            }
            &Op::RepeatColBlocks { a, block, times } => {
                let (m, n) = self.value(a).dims2();
                let mut d = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let gr = g.row(i);
                    let dr = d.row_mut(i);
                    for (gi, chunk) in dr.chunks_exact_mut(block).enumerate() {
                        for t in 0..times {
                            let src = &gr[(gi * times + t) * block..(gi * times + t + 1) * block];
                            for (c, &s) in chunk.iter_mut().zip(src) {
                                *c = *c + s;
                            }
                        }
                    }
                }
                accumulate(grads, a, d)?
            }
            Op::RmsNormRows { a, inv_rms } => {
                let (m, n) = y.dims2();
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mean: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / r(n as f64);
                    for j in 0..n {
                        d[i * n + j] = (gr[j] - yr[j] * mean) * inv_rms[i];
                    }
                }
                accumulate(grads, *a, Tensor::new(&[m, n], d)?)?
            }
            Op::L2NormBlocks { a, block, inv_norm } => {
                let mut d = g.clone();
                for ((dc, yc), &inv) in d
                    .data_mut()
                    .chunks_exact_mut(*block)
                    .zip(y.data().chunks_exact(*block))
                    .zip(inv_norm)
                {
                    let dot: T = dc.iter().zip(yc).map(|(&p, &q)| p * q).sum();
                    for (dv, &yv) in dc.iter_mut().zip(yc) {
                        *dv = (*dv - yv * dot) * inv;
                    }
                }
                accumulate(grads, *a, d)?
            }
            Op::Rope { a, head_dim, cos, sin } => {
                let mut d = g.clone();
                let n = d.cols();
                apply_rope(d.data_mut(), n, *head_dim, cos, sin, true);
                accumulate(grads, *a, d)?
            }
            Op::Gather { table, ids } => {
                let mut d = Tensor::zeros(self.shape(*table));
                for (i, &id) in ids.iter().enumerate() {
                    for (acc, &v) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *acc = *acc + v;
                    }
                }
                accumulate(grads, *table, d)?
            }
            &Op::HeadMatmul { x, w, heads } => {
                let xs = self.value(x);
                let ws = self.value(w);
                let (m, n) = xs.dims2();
                let h = n / heads;
                if self.needs(x) {
                    let mut dx = vec![T::zero(); m * n];
                    for gi in 0..heads {
                        let wg = &ws.data()[gi * h * h..(gi + 1) * h * h];
                        head_gemm(g.data(), m, n, gi * h, h, wg, true, &mut dx, gi * h, false);
                    }
                    accumulate(grads, x, Tensor::new(&[m, n], dx)?)?;
                }
                if self.needs(w) {
                    let mut dw = vec![T::zero(); n * h];
                    for gi in 0..heads {
                        let xg = xs.slice_cols(gi * h, h);
                        let gg = g.slice_cols(gi * h, h);
                        gemm_into(
                            xg.data(),
                            m,
                            h,
                            true,
                            gg.data(),
                            m,
                            h,
                            false,
                            &mut dw[gi * h * h..(gi + 1) * h * h],
                            false,
                        );
                    }
                    accumulate(grads, w, Tensor::new(&[n, h], dw)?)?;
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let ds = op.backward(&values, y, g, &needs)?;
                for ((&v, d), need) in inputs.iter().zip(ds).zip(needs) {
                    if let (Some(d), true) = (d, need) {
                        if d.shape() != self.shape(v) {
                            return Err(Error::dim(op.name(), d.shape(), self.shape(v)));
                        }
                        accumulate(grads, v, d)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&d),
        slot => {
            *slot = Some(d);
            Ok(())
        }
    }
}

/// `out[:, oc..oc+h] (+)= x[:, xc..xc+h] · op(w)` for row-major `x` with `n` columns.
#[allow(clippy::too_many_arguments)]
fn head_gemm<T: Real>(
    x: &[T],
    m: usize,
    n: usize,
    xc: usize,
    h: usize,
    w: &[T],
    tw: bool,
    out: &mut [T],
    oc: usize,
    accumulate: bool,
) {
    assert!(xc + h <= n && oc + h <= n && x.len() == m * n && out.len() == m * n && w.len() == h * h);
    let (rsw, csw) = if tw { (1, h as isize) } else { (h as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: column windows are bounds-checked above; `out` does not alias `x` or `w`.
    unsafe {
        T::gemm(
            m,
            h,
            h,
            T::one(),
            x.as_ptr().add(xc),
            n as isize,
            1,
            w.as_ptr(),
            rsw,
            csw,
            beta,
            out.as_mut_ptr().add(oc),
            n as isize,
            1,
        );
    }
}
