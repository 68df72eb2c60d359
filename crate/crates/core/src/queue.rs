//! FIFO dictionary of key embeddings used as contrastive negatives.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// Fixed-capacity ring buffer of unit-norm key vectors.
#[derive(Debug, Clone)]
pub struct NegativeQueue {
    /// `capacity x dim` storage; rows `[0, fill)` are live once wrapped logically.
    buf: Array2<f64>,
    /// Row that the next key is written to.
    head: usize,
    fill: usize,
}

/// Equal when capacity and live entries (in FIFO order) agree, whatever the
/// ring offset.
impl PartialEq for NegativeQueue {
    fn eq(&self, other: &Self) -> bool {
        self.capacity() == other.capacity()
            && self.fill == other.fill
            && self.ordered() == other.ordered()
    }
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::config(
                "queue capacity and dimension must be positive",
            ));
        }
        Ok(Self {
            buf: Array2::zeros((capacity, dim)),
            head: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.buf.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buf.ncols()
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.capacity()
    }

    /// Append rows in order, evicting the oldest entries on overflow.
    pub fn enqueue_batch(&mut self, keys: ArrayView2<'_, f64>) -> Result<()> {
        let (b, d) = keys.dim();
        if d != self.dim() {
            return Err(Error::shape(format!(
                "keys have dimension {d}, queue holds {}",
                self.dim()
            )));
        }
        if b > self.capacity() {
            return Err(Error::config(format!(
                "batch of {b} keys exceeds queue capacity {}",
                self.capacity()
            )));
        }
        for (i, row) in keys.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::Validation(format!(
                    "key row {i} has norm {norm}, expected 1"
                )));
            }
        }
        let n = self.capacity();
        let first = b.min(n - self.head);
        self.buf
            .slice_mut(s![self.head..self.head + first, ..])
            .assign(&keys.slice(s![..first, ..]));
        if first < b {
            self.buf
                .slice_mut(s![..b - first, ..])
                .assign(&keys.slice(s![first.., ..]));
        }
        self.head = (self.head + b) % n;
        self.fill = (self.fill + b).min(n);
        Ok(())
    }

    /// Owned copy of the live entries, oldest first.
    pub fn snapshot(&self) -> Result<Array2<f64>> {
        if self.fill == 0 {
            return Err(Error::EmptyQueue);
        }
        Ok(self.ordered())
    }

    fn ordered(&self) -> Array2<f64> {
        let n = self.capacity();
        if self.fill < n {
            // Never wrapped: live rows are [0, fill).
            self.buf.slice(s![..self.fill, ..]).to_owned()
        } else {
            ndarray::concatenate(
                Axis(0),
                &[
                    self.buf.slice(s![self.head.., ..]),
                    self.buf.slice(s![..self.head, ..]),
                ],
            )
            .expect("matching widths")
        }
    }

    /// Serialized form: live rows (oldest first) plus capacity.
    pub fn to_parts(&self) -> (Array2<f64>, usize) {
        (self.ordered(), self.capacity())
    }

    pub fn from_parts(entries: Array2<f64>, capacity: usize) -> Result<Self> {
        let mut q = Self::new(capacity, entries.ncols())?;
        if entries.nrows() > capacity {
            return Err(Error::Validation(format!(
                "{} stored entries exceed capacity {capacity}",
                entries.nrows()
            )));
        }
        if entries.nrows() > 0 {
            q.enqueue_batch(entries.view())?;
        }
        Ok(q)
    }
}
