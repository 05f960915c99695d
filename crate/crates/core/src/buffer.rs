//! Fixed-capacity dark-experience memory.
//!
//! Every example offered is retained with probability `capacity / seen`
//! (reservoir sampling), so the store stays a uniform sample of the whole
//! training stream without knowing its length in advance. Each entry keeps
//! the logits the network produced when the example was offered.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use crate::dsp::FeatureMatrix;
use crate::error::{input_err, Error, Result};
use crate::rng::Rng as StreamRng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry<T> {
    pub features: Arc<FeatureMatrix<T>>,
    pub label: usize,
    /// Pre-softmax outputs captured at insertion time.
    pub logits: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ReservoirBuffer<T> {
    capacity: usize,
    num_classes: usize,
    entries: Vec<BufferEntry<T>>,
    num_seen: u64,
    rng: StreamRng,
}

impl<T: Scalar> ReservoirBuffer<T> {
    pub fn new(capacity: usize, num_classes: usize, rng: StreamRng) -> Self {
        Self { capacity, num_classes, entries: Vec::with_capacity(capacity.min(1 << 16)), num_seen: 0, rng }
    }

    /// Restores a buffer from checkpointed parts.
    pub fn from_parts(
        capacity: usize,
        num_classes: usize,
        entries: Vec<BufferEntry<T>>,
        num_seen: u64,
        rng: StreamRng,
    ) -> Result<Self> {
        if entries.len() as u64 != num_seen.min(capacity as u64) {
            return Err(Error::Checkpoint(format!(
                "buffer holds {} entries but min(seen {num_seen}, capacity {capacity}) differs",
                entries.len()
            )));
        }
        if let Some(e) = entries.iter().find(|e| e.logits.len() != num_classes) {
            return Err(Error::Checkpoint(format!("entry with {} logits, expected {num_classes}", e.logits.len())));
        }
        Ok(Self { capacity, num_classes, entries, num_seen, rng })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_seen(&self) -> u64 {
        self.num_seen
    }

    /// `(stored, offered so far)`.
    pub fn occupancy(&self) -> (usize, u64) {
        (self.entries.len(), self.num_seen)
    }

    pub fn entries(&self) -> &[BufferEntry<T>] {
        &self.entries
    }

    pub fn rng(&self) -> &StreamRng {
        &self.rng
    }

    /// Offers one example. With zero capacity nothing is stored but the
    /// offer is still counted.
    pub fn insert(&mut self, entry: BufferEntry<T>) -> Result<()> {
        if entry.logits.len() != self.num_classes {
            return Err(input_err!("entry has {} logits, buffer expects {}", entry.logits.len(), self.num_classes));
        }
        if (self.num_seen as usize) < self.capacity {
            self.entries.push(entry);
        } else if self.capacity > 0 {
            let j = self.rng.random_range(0..=self.num_seen);
            if (j as usize) < self.capacity {
                self.entries[j as usize] = entry;
            }
        }
        self.num_seen += 1;
        Ok(())
    }

    /// Up to `k` distinct entries drawn uniformly without replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<BufferEntry<T>>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let k = k.min(self.entries.len());
        Ok(index::sample(rng, self.entries.len(), k).into_iter().map(|i| self.entries[i].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn entry(id: usize, classes: usize) -> BufferEntry<f64> {
        let f = FeatureMatrix::new(1, 1, vec![id as f64]).unwrap();
        BufferEntry { features: Arc::new(f), label: id % classes, logits: vec![id as f64; classes] }
    }

    fn id_of(e: &BufferEntry<f64>) -> usize {
        e.features.values()[0] as usize
    }

    #[test]
    fn fill_phase_keeps_offer_order() {
        let mut b = ReservoirBuffer::new(5, 3, stream(0, Stream::Reservoir));
        assert_eq!(b.occupancy(), (0, 0));
        for i in 0..5 {
            b.insert(entry(i, 3)).unwrap();
        }
        assert_eq!(b.occupancy(), (5, 5));
        assert_eq!(b.entries().iter().map(id_of).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_capacity_only_counts() {
        let mut b = ReservoirBuffer::new(0, 3, stream(0, Stream::Reservoir));
        for i in 0..3 {
            b.insert(entry(i, 3)).unwrap();
        }
        assert_eq!(b.occupancy(), (0, 3));
        assert!(matches!(b.sample_batch(4, &mut stream(1, Stream::Sampler)), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn capacity_clamps_after_long_stream() {
        let mut b = ReservoirBuffer::new(50, 2, stream(4, Stream::Reservoir));
        for i in 0..1000 {
            b.insert(entry(i, 2)).unwrap();
            assert_eq!(b.len() as u64, b.num_seen().min(50));
        }
        assert_eq!(b.occupancy(), (50, 1000));
    }

    #[test]
    fn rejects_wrong_logit_width() {
        let mut b = ReservoirBuffer::new(2, 3, stream(0, Stream::Reservoir));
        assert!(b.insert(entry(0, 4)).is_err());
        assert_eq!(b.num_seen(), 0);
    }

    #[test]
    fn sample_clamps_and_is_distinct() {
        let mut b = ReservoirBuffer::new(500, 3, stream(0, Stream::Reservoir));
        for i in 0..3 {
            b.insert(entry(i, 3)).unwrap();
        }
        let mut rng = stream(2, Stream::Sampler);
        let s = b.sample_batch(10, &mut rng).unwrap();
        let mut ids: Vec<usize> = s.iter().map(id_of).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2]);

        for i in 3..500 {
            b.insert(entry(i, 3)).unwrap();
        }
        let s = b.sample_batch(128, &mut rng).unwrap();
        let mut ids: Vec<usize> = s.iter().map(id_of).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 128);
    }

    #[test]
    fn sampled_entries_are_snapshots() {
        let mut b = ReservoirBuffer::new(4, 2, stream(0, Stream::Reservoir));
        b.insert(entry(7, 2)).unwrap();
        let mut s = b.sample_batch(1, &mut stream(0, Stream::Sampler)).unwrap();
        s[0].logits[0] = -99.0;
        assert_eq!(b.entries()[0].logits, vec![7.0, 7.0]);
    }

    #[test]
    fn from_parts_checks_accounting() {
        let rng = stream(0, Stream::Reservoir);
        assert!(ReservoirBuffer::from_parts(2, 2, vec![entry(0, 2)], 1, rng.clone()).is_ok());
        assert!(ReservoirBuffer::from_parts(2, 2, vec![entry(0, 2)], 5, rng.clone()).is_err());
        assert!(ReservoirBuffer::from_parts(2, 3, vec![entry(0, 2)], 1, rng).is_err());
    }
}
