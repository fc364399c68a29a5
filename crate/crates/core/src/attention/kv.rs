//! Lossless attention memory: sink rows plus a FIFO ring of recent rows.

use crate::error::{Error, Result};

/// Fixed-width rows in a ring buffer; `cap == None` grows without eviction.
#[derive(Clone, Debug)]
pub(crate) struct Ring<T> {
    data: Vec<T>,
    width: usize,
    cap: Option<usize>,
    head: usize,
    len: usize,
}

impl<T: Copy + Default> Ring<T> {
    pub(crate) fn new(width: usize, cap: Option<usize>) -> Self {
        Ring {
            data: Vec::with_capacity(width * cap.unwrap_or(0).min(1 << 16)),
            width,
            cap,
            head: 0,
            len: 0,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    fn is_full(&self) -> bool {
        self.cap == Some(self.len)
    }

    fn slot(&self, i: usize) -> usize {
        match self.cap {
            Some(c) => (self.head + i) % c,
            None => i,
        }
    }

    fn row(&self, i: usize) -> &[T] {
        let s = self.slot(i);
        &self.data[s * self.width..(s + 1) * self.width]
    }

    /// Appends a row, returning the displaced oldest row when at capacity.
    pub(crate) fn push(&mut self, row: &[T]) -> Option<Vec<T>> {
        debug_assert_eq!(row.len(), self.width);
        match self.cap {
            Some(c) if self.len == c => {
                let s = self.head;
                let old = self.data[s * self.width..(s + 1) * self.width].to_vec();
                self.data[s * self.width..(s + 1) * self.width].copy_from_slice(row);
                self.head = (self.head + 1) % c;
                Some(old)
            }
            _ => {
                if self.data.len() < (self.len + 1) * self.width {
                    self.data.extend_from_slice(row);
                } else {
                    let s = self.slot(self.len);
                    self.data[s * self.width..(s + 1) * self.width].copy_from_slice(row);
                }
                self.len += 1;
                None
            }
        }
    }

    /// Stored rows as at most two contiguous chunks, oldest first.
    pub(crate) fn segments(&self) -> impl Iterator<Item = &[T]> {
        let w = self.width;
        let (first, second) = match self.cap {
            Some(c) if self.head + self.len > c => {
                let tail = c - self.head;
                (&self.data[self.head * w..c * w], &self.data[..(self.len - tail) * w])
            }
            _ => (&self.data[self.head * w..(self.head + self.len) * w], &self.data[..0]),
        };
        [first, second].into_iter().filter(|s| !s.is_empty())
    }
}

/// A key/value pair that left the sliding window, with the hidden row that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvictedPair<T> {
    /// Keys of every kv head, `[n_kv_heads · head_dim]`.
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Layer input (post-normalisation) of the evicted token, `[d_model]`.
    pub x: Vec<T>,
    pub pos: usize,
}

/// Per-layer KV cache: `sinks` permanent rows, then a ring of the last `window` rows.
#[derive(Clone, Debug)]
pub struct KvWindow<T> {
    sinks: usize,
    sink_k: Vec<T>,
    sink_v: Vec<T>,
    sink_pos: Vec<usize>,
    ring_k: Ring<T>,
    ring_v: Ring<T>,
    ring_x: Ring<T>,
    ring_pos: Ring<usize>,
    kv_width: usize,
    last: Option<usize>,
}

impl<T: Copy + Default> KvWindow<T> {
    pub fn new(sinks: usize, window: usize, kv_width: usize, x_width: usize) -> Self {
        assert!(window >= 1, "window must be at least 1");
        Self::with_capacity(sinks, Some(window), kv_width, x_width)
    }

    /// A cache that never evicts (full attention).
    pub fn unbounded(kv_width: usize, x_width: usize) -> Self {
        Self::with_capacity(0, None, kv_width, x_width)
    }

    fn with_capacity(sinks: usize, window: Option<usize>, kv_width: usize, x_width: usize) -> Self {
        KvWindow {
            sinks,
            sink_k: Vec::with_capacity(sinks * kv_width),
            sink_v: Vec::with_capacity(sinks * kv_width),
            sink_pos: Vec::with_capacity(sinks),
            ring_k: Ring::new(kv_width, window),
            ring_v: Ring::new(kv_width, window),
            ring_x: Ring::new(x_width, window),
            ring_pos: Ring::new(1, window),
            kv_width,
            last: None,
        }
    }

    pub fn kv_width(&self) -> usize {
        self.kv_width
    }

    /// Number of stored rows.
    pub fn len(&self) -> usize {
        self.sink_pos.len() + self.ring_pos.len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> Option<usize> {
        self.ring_pos.cap.map(|w| w + self.sinks)
    }

    /// Appends the row for position `pos`; returns the evicted oldest ring row, if any.
    pub fn append(&mut self, k: &[T], v: &[T], x: &[T], pos: usize) -> Result<Option<EvictedPair<T>>> {
        if let Some(last) = self.last {
            if pos <= last {
                return Err(Error::Ordering { pos, last });
            }
        }
        if k.len() != self.kv_width || v.len() != self.kv_width {
            return Err(Error::dim("kv_append", &[k.len(), v.len()], &[self.kv_width]));
        }
        if x.len() != self.ring_x.width {
            return Err(Error::dim("kv_append", &[x.len()], &[self.ring_x.width]));
        }
        self.last = Some(pos);
        if self.sink_pos.len() < self.sinks {
            self.sink_k.extend_from_slice(k);
            self.sink_v.extend_from_slice(v);
            self.sink_pos.push(pos);
            return Ok(None);
        }
        let evicted = self.ring_pos.is_full();
        let ok = self.ring_k.push(k);
        let ov = self.ring_v.push(v);
        let ox = self.ring_x.push(x);
        let op = self.ring_pos.push(&[pos]);
        if !evicted {
            return Ok(None);
        }
        match (ok, ov, ox, op) {
            (Some(k), Some(v), Some(x), Some(p)) => Ok(Some(EvictedPair { k, v, x, pos: p[0] })),
            _ => unreachable!("rings evict together"),
        }
    }

    /// Stored positions, oldest first.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = self.sink_pos.clone();
        out.extend((0..self.ring_pos.len).map(|i| self.ring_pos.row(i)[0]));
        out
    }

    /// Key rows as contiguous chunks in position order.
    pub fn key_segments(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(3);
        if !self.sink_k.is_empty() {
            out.push(self.sink_k.as_slice());
        }
        out.extend(self.ring_k.segments());
        out
    }

    pub fn value_segments(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(3);
        if !self.sink_v.is_empty() {
            out.push(self.sink_v.as_slice());
        }
        out.extend(self.ring_v.segments());
        out
    }

    /// Stored keys concatenated in position order, `[len, kv_width]` row-major.
    pub fn keys(&self) -> Vec<T> {
        self.key_segments().concat()
    }

    pub fn values(&self) -> Vec<T> {
        self.value_segments().concat()
    }
}
