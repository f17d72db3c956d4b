//! Fixed-capacity FIFO of key features with a parallel label ring.
//!
//! Slots that were never written are invalid and are excluded from every
//! snapshot, so a cold queue simply contributes fewer negatives.

use crate::error::{Error, Result};
use crate::math::norm;

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    /// `capacity × dim`, row per slot.
    features: Vec<f64>,
    labels: Vec<usize>,
    valid: Vec<bool>,
    head: usize,
    count: usize,
}

/// Owned copy of the valid queue contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueueSnapshot {
    pub dim: usize,
    /// `count × dim`, row-major.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl QueueSnapshot {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>], labels: &[usize]) -> Self {
        assert_eq!(rows.len(), labels.len());
        Self {
            dim,
            features: rows.iter().flatten().copied().collect(),
            labels: labels.to_vec(),
        }
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .chunks_exact(self.dim.max(1))
            .zip(self.labels.iter().copied())
    }
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidQueue("capacity must be >= 1".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidQueue("dim must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            dim,
            features: vec![0.0; capacity * dim],
            labels: vec![0; capacity],
            valid: vec![false; capacity],
            head: 0,
            count: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Enqueue a batch of unit-norm keys, overwriting the oldest slots. The
    /// batch size must divide the capacity.
    pub fn push(&mut self, keys: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        if keys.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} keys with {} labels",
                keys.len(),
                labels.len()
            )));
        }
        let b = keys.len();
        if b == 0 {
            return Ok(());
        }
        if b > self.capacity || !self.capacity.is_multiple_of(b) {
            return Err(Error::BatchTooLarge {
                batch: b,
                capacity: self.capacity,
            });
        }
        for (i, k) in keys.iter().enumerate() {
            if k.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    got: k.len(),
                });
            }
            let n = norm(k);
            if !((n - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::NormViolation { index: i, norm: n });
            }
        }
        for (k, &y) in keys.iter().zip(labels) {
            let slot = self.head;
            self.features[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(k);
            self.labels[slot] = y;
            if !self.valid[slot] {
                self.valid[slot] = true;
                self.count += 1;
            }
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// Valid entries, oldest first.
    pub fn snapshot(&self) -> QueueSnapshot {
        let mut snap = QueueSnapshot {
            dim: self.dim,
            features: Vec::with_capacity(self.count * self.dim),
            labels: Vec::with_capacity(self.count),
        };
        for j in 0..self.capacity {
            let slot = (self.head + j) % self.capacity;
            if self.valid[slot] {
                snap.features
                    .extend_from_slice(&self.features[slot * self.dim..(slot + 1) * self.dim]);
                snap.labels.push(self.labels[slot]);
            }
        }
        snap
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(i: usize) -> Vec<f64> {
        let a = i as f64 * 0.37;
        vec![a.cos(), a.sin()]
    }

    #[test]
    fn construction() {
        let q = FeatureQueue::new(8192, 16).unwrap();
        assert_eq!(q.capacity(), 8192);
        assert_eq!(q.snapshot().count(), 0);
        assert!(FeatureQueue::new(1, 2).is_ok());
        assert!(FeatureQueue::new(0, 2).is_err());
        assert!(FeatureQueue::new(4, 0).is_err());
    }

    #[test]
    fn fifo_order() {
        let mut q = FeatureQueue::new(4, 2).unwrap();
        let k: Vec<Vec<f64>> = (0..6).map(unit).collect();
        q.push(&k[0..2], &[0, 1]).unwrap();
        q.push(&k[2..4], &[2, 3]).unwrap();
        q.push(&k[4..6], &[4, 5]).unwrap();
        let s = q.snapshot();
        assert_eq!(s.labels, vec![2, 3, 4, 5]);
        for (i, (f, _)) in s.iter().enumerate() {
            assert_eq!(f, k[i + 2].as_slice());
        }
    }

    #[test]
    fn full_push_replaces_everything() {
        let mut q = FeatureQueue::new(4, 2).unwrap();
        let k: Vec<Vec<f64>> = (0..8).map(unit).collect();
        q.push(&k[0..4], &[0, 0, 0, 0]).unwrap();
        q.push(&k[4..8], &[1, 1, 1, 1]).unwrap();
        assert_eq!(q.snapshot().labels, vec![1; 4]);
        assert_eq!(q.snapshot().feature(0), k[4].as_slice());
    }

    #[test]
    fn rejects_bad_pushes() {
        let mut q = FeatureQueue::new(4, 2).unwrap();
        let k: Vec<Vec<f64>> = (0..5).map(unit).collect();
        assert!(matches!(
            q.push(&k[0..3], &[0, 0, 0]),
            Err(Error::BatchTooLarge { .. })
        ));
        assert!(matches!(
            q.push(&k[0..5], &[0; 5]),
            Err(Error::BatchTooLarge { .. })
        ));
        assert!(matches!(
            q.push(&[vec![1.0, 1.0]], &[0]),
            Err(Error::NormViolation { .. })
        ));
        assert!(q.push(&k[0..2], &[0]).is_err());
        assert!(q.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matches_truncated_list(push in 1usize..5, mult in 1usize..5, rounds in 0usize..10, seed in any::<u64>()) {
                let capacity = push * mult;
                let mut q = FeatureQueue::new(capacity, 2).unwrap();
                let mut oracle: Vec<(Vec<f64>, usize)> = Vec::new();
                let mut n = seed as usize;
                for _ in 0..rounds {
                    let batch: Vec<(Vec<f64>, usize)> = (0..push)
                        .map(|_| {
                            n = n.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                            (unit(n % 1000), n % 17)
                        })
                        .collect();
                    let (keys, labels): (Vec<_>, Vec<_>) = batch.iter().cloned().unzip();
                    q.push(&keys, &labels).unwrap();
                    oracle.extend(batch);
                }
                let tail = &oracle[oracle.len().saturating_sub(capacity)..];
                let snap = q.snapshot();
                prop_assert_eq!(snap.count(), tail.len());
                for (i, (f, y)) in tail.iter().enumerate() {
                    prop_assert_eq!(snap.feature(i), f.as_slice());
                    prop_assert_eq!(snap.labels[i], *y);
                }
            }
        }
    }
}
