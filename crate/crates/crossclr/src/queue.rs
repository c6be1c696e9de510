//! Fixed-capacity FIFO store of paired raw input embeddings. Serves as the
//! connectivity reference set and the intra-modality negative pool.
//!
//! The queue stores raw (pre-encoder) inputs: influence is defined on input
//! embeddings, so encoder outputs are never queued.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MemoryQueue {
    capacity: usize,
    dim_x: usize,
    dim_y: usize,
    entries: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim_x: usize, dim_y: usize) -> Self {
        Self {
            capacity,
            dim_x,
            dim_y,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_x, self.dim_y)
    }

    /// Appends a paired batch, evicting exactly the oldest samples that no
    /// longer fit. Pairs are evicted together.
    pub fn enqueue(&mut self, x: &EmbeddingBatch, y: &EmbeddingBatch) -> Result<()> {
        if x.n() != y.n() {
            return Err(Error::DimensionMismatch(format!(
                "paired batches differ in size: {} vs {}",
                x.n(),
                y.n()
            )));
        }
        if x.dim() != self.dim_x || y.dim() != self.dim_y {
            return Err(Error::DimensionMismatch(format!(
                "queue expects dims ({}, {}), got ({}, {})",
                self.dim_x,
                self.dim_y,
                x.dim(),
                y.dim()
            )));
        }
        if x.n() > self.capacity {
            return Err(Error::BatchLargerThanCapacity {
                batch: x.n(),
                capacity: self.capacity,
            });
        }
        for i in 0..x.n() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries
                .push_back((x.row(i).to_vec(), y.row(i).to_vec()));
        }
        Ok(())
    }

    /// Contiguous copies of the current contents in insertion order. The
    /// snapshot is isolated from later enqueues.
    pub fn snapshot(&self) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
        if self.entries.is_empty() {
            return Err(Error::EmptyQueue);
        }
        let n = self.entries.len();
        let mut x = Array2::zeros((n, self.dim_x));
        let mut y = Array2::zeros((n, self.dim_y));
        for (i, (xr, yr)) in self.entries.iter().enumerate() {
            for (j, v) in xr.iter().enumerate() {
                x[[i, j]] = *v;
            }
            for (j, v) in yr.iter().enumerate() {
                y[[i, j]] = *v;
            }
        }
        Ok((EmbeddingBatch::new(x)?, EmbeddingBatch::new(y)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_batch(vals: &[f64]) -> (EmbeddingBatch, EmbeddingBatch) {
        let rows: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v, 1.0]).collect();
        (
            EmbeddingBatch::from_rows(&rows).unwrap(),
            EmbeddingBatch::from_rows(&rows).unwrap(),
        )
    }

    fn x_vals(q: &MemoryQueue) -> Vec<f64> {
        let (x, _) = q.snapshot().unwrap();
        (0..x.n()).map(|i| x.row(i)[0]).collect()
    }

    #[test]
    fn fifo_order() {
        let mut q = MemoryQueue::new(4, 2, 2);
        for chunk in [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]] {
            let (x, y) = pair_batch(&chunk);
            q.enqueue(&x, &y).unwrap();
        }
        assert_eq!(x_vals(&q), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn partial_eviction() {
        let mut q = MemoryQueue::new(4, 2, 2);
        let (x, y) = pair_batch(&[1.0, 2.0, 3.0]);
        q.enqueue(&x, &y).unwrap();
        let (x, y) = pair_batch(&[4.0, 5.0, 6.0]);
        q.enqueue(&x, &y).unwrap();
        // retained = last 4 of the stream (3,4,5,6)
        assert_eq!(x_vals(&q), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn batch_larger_than_capacity() {
        let mut q = MemoryQueue::new(5, 2, 2);
        let vals: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let (x, y) = pair_batch(&vals);
        assert!(matches!(
            q.enqueue(&x, &y),
            Err(Error::BatchLargerThanCapacity { batch: 10, capacity: 5 })
        ));
    }

    #[test]
    fn empty_snapshot_errors() {
        let q = MemoryQueue::new(4, 2, 2);
        assert!(matches!(q.snapshot(), Err(Error::EmptyQueue)));
    }

    #[test]
    fn snapshot_isolation() {
        let mut q = MemoryQueue::new(4, 2, 2);
        let (x, y) = pair_batch(&[1.0, 2.0]);
        q.enqueue(&x, &y).unwrap();
        let (snap_x, _) = q.snapshot().unwrap();
        let before: Vec<f64> = (0..snap_x.n()).map(|i| snap_x.row(i)[0]).collect();
        let (x, y) = pair_batch(&[9.0, 10.0, 11.0]);
        q.enqueue(&x, &y).unwrap();
        let after: Vec<f64> = (0..snap_x.n()).map(|i| snap_x.row(i)[0]).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn pairing_survives_eviction() {
        let mut q = MemoryQueue::new(3, 1, 1);
        for v in 0..7 {
            let x = EmbeddingBatch::from_rows(&[vec![v as f64 + 1.0]]).unwrap();
            let y = EmbeddingBatch::from_rows(&[vec![-(v as f64 + 1.0)]]).unwrap();
            q.enqueue(&x, &y).unwrap();
        }
        let (x, y) = q.snapshot().unwrap();
        for i in 0..3 {
            assert_eq!(x.row(i)[0], -y.row(i)[0]);
        }
    }
}
