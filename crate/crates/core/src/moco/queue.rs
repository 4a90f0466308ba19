use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from;

const UNIT_TOL: f32 = 1e-4;

/// Fixed-size FIFO of key embeddings used as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    keys: Array2<f32>,
    ptr: usize,
}

impl KeyQueue {
    /// Queue of `size` random unit vectors of width `dim`.
    pub fn random(size: usize, dim: usize, seed: u64) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Size(format!("queue of {size} x {dim}")));
        }
        let mut rng = rng_from(seed);
        let mut keys = Array2::<f32>::zeros((size, dim));
        for mut row in keys.rows_mut() {
            loop {
                row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                let n = row.dot(&row).sqrt();
                if n > 1e-3 {
                    row /= n;
                    break;
                }
            }
        }
        Ok(KeyQueue { keys, ptr: 0 })
    }

    /// Restores a queue from stored rows and write pointer.
    pub fn from_parts(keys: Array2<f32>, ptr: usize) -> Result<Self> {
        if keys.nrows() == 0 || ptr >= keys.nrows() {
            return Err(Error::Validation(format!(
                "queue pointer {ptr} for {} rows",
                keys.nrows()
            )));
        }
        check_unit(keys.view())?;
        Ok(KeyQueue { keys, ptr })
    }

    pub fn keys(&self) -> ArrayView2<'_, f32> {
        self.keys.view()
    }

    pub fn ptr(&self) -> usize {
        self.ptr
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.ncols()
    }

    /// Overwrites the oldest `B` rows with `batch` and advances the pointer,
/// wrapping past the end when batch sizes vary.
    pub fn enqueue(&mut self, batch: ArrayView2<f32>) -> Result<()> {
        let (b, k) = (batch.nrows(), self.len());
        if b == 0 || b > k {
            return Err(Error::Size(format!("cannot enqueue {b} keys into a queue of {k}")));
        }
        if k % b != 0 {
            return Err(Error::Size(format!("batch of {b} does not divide queue size {k}")));
        }
        if batch.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "key width {} vs queue width {}",
                batch.ncols(),
                self.dim()
            )));
        }
        check_unit(batch)?;
        for (i, row) in batch.rows().into_iter().enumerate() {
            self.keys.row_mut((self.ptr + i) % k).assign(&row);
        }
        self.ptr = (self.ptr + b) % k;
        Ok(())
    }
}

fn check_unit(rows: ArrayView2<f32>) -> Result<()> {
    for (i, r) in rows.rows().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if !((n - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::Validation(format!("key {i} has norm {n}")));
        }
    }
    Ok(())
}

/// Functional form: returns the updated queue and pointer.
pub fn enqueue_dequeue(
    queue: &Array2<f32>,
    ptr: usize,
    keys: ArrayView2<f32>,
) -> Result<(Array2<f32>, usize)> {
    let mut q = KeyQueue::from_parts(queue.clone(), ptr)?;
    q.enqueue(keys)?;
    Ok((q.keys, q.ptr))
}
