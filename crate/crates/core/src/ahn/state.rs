use crate::numerics::Real;

/// Fixed-size compressed memory of one layer: an `H × H` matrix per query head
/// (rows index key channels, columns value channels).
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedState<T> {
    heads: usize,
    head_dim: usize,
    h: Vec<T>,
    step: usize,
}

impl<T: Real> CompressedState<T> {
    pub fn zeros(heads: usize, head_dim: usize) -> Self {
        CompressedState {
            heads,
            head_dim,
            h: vec![T::zero(); heads * head_dim * head_dim],
            step: 0,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Number of evicted pairs absorbed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub(crate) fn advance(&mut self) {
        self.step += 1;
    }

    pub fn head(&self, g: usize) -> &[T] {
        let n = self.head_dim * self.head_dim;
        &self.h[g * n..(g + 1) * n]
    }

    pub fn head_mut(&mut self, g: usize) -> &mut [T] {
        let n = self.head_dim * self.head_dim;
        &mut self.h[g * n..(g + 1) * n]
    }

    pub fn data(&self) -> &[T] {
        &self.h
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.h
    }

    /// Bytes occupied by the memory matrices.
    pub fn byte_size(&self) -> usize {
        self.h.len() * std::mem::size_of::<T>()
    }

    pub fn is_zero(&self) -> bool {
        self.h.iter().all(|v| v.is_zero())
    }

    /// `a · self + b · other`, used for linearity checks.
    pub fn combine(&self, a: T, other: &Self, b: T) -> Self {
        let mut out = self.clone();
        for (o, &y) in out.h.iter_mut().zip(&other.h) {
            *o = a * *o + b * y;
        }
        out
    }
}
