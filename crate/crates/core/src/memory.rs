//! Episodic replay memories: reservoir sampling, a growing per-batch store,
//! and per-task quota stores rebalanced as tasks arrive.

use rand::seq::index;
use rand::Rng;

use crate::container::{PayloadKind, Reader, Writer, NO_TASK};
use crate::error::{Error, Result};
use crate::model::{get_scalar, put_scalar};
use crate::scalar::{scalar_bytes, Real};

/// A stored training item: raw features or a fixed representation of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub features: Vec<T>,
    pub label: u32,
    pub task: Option<u32>,
}

impl<T> Sample<T> {
    /// Record size in the accounting model: width x scalar size.
    pub fn stored_bytes(&self) -> usize {
        self.features.len() * scalar_bytes::<T>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMode {
    #[default]
    WithoutReplacement,
    WithReplacement,
}

/// Draws `k` items. Without replacement the draw is `min(k, len)` distinct
/// items in random order; with replacement it is exactly `k` items. Drawing
/// from an empty pool yields nothing.
pub fn sample_from<'a, I: Clone + 'a>(
    pool: &[&'a I],
    k: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Vec<I> {
    if k == 0 || pool.is_empty() {
        if k > 0 {
            log::debug!("sampling {k} items from an empty memory");
        }
        return Vec::new();
    }
    match mode {
        SampleMode::WithoutReplacement => index::sample(rng, pool.len(), k.min(pool.len()))
            .into_iter()
            .map(|i| pool[i].clone())
            .collect(),
        SampleMode::WithReplacement => (0..k)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect(),
    }
}

/// Common read interface used by strategies and the resource meter.
pub trait ReplayMemory<T> {
    fn items(&self) -> Vec<&Sample<T>>;

    fn len(&self) -> usize {
        self.items().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn size_bytes(&self) -> usize {
        self.items().iter().map(|s| s.stored_bytes()).sum()
    }

    fn sample(&self, k: usize, rng: &mut impl Rng) -> Vec<Sample<T>>
    where
        T: Clone,
    {
        sample_from(&self.items(), k, SampleMode::WithoutReplacement, rng)
    }
}

/// Fixed-capacity uniform sample of everything inserted so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirMemory<T> {
    capacity: usize,
    items: Vec<Sample<T>>,
    seen: u64,
}

impl<T> ReservoirMemory<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn stored(&self) -> &[Sample<T>] {
        &self.items
    }

    /// Item `t` is kept outright while `t <= capacity`, otherwise with
    /// probability `capacity / t` in place of a uniformly chosen slot.
    pub fn update(&mut self, item: Sample<T>, rng: &mut impl Rng) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
            return;
        }
        let j = rng.random_range(0..self.seen);
        if j < self.capacity as u64 {
            self.items[j as usize] = item;
        }
    }
}

impl<T> ReplayMemory<T> for ReservoirMemory<T> {
    fn items(&self) -> Vec<&Sample<T>> {
        self.items.iter().collect()
    }
    fn len(&self) -> usize {
        self.items.len()
    }
}

/// Keeps `quota` uniformly chosen items from every batch, forever.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowingMemory<T> {
    quota: usize,
    per_batch: Vec<Vec<Sample<T>>>,
}

impl<T: Clone> GrowingMemory<T> {
    pub fn new(quota: usize) -> Self {
        Self {
            quota,
            per_batch: Vec::new(),
        }
    }

    pub fn quota(&self) -> usize {
        self.quota
    }

    pub fn batches_stored(&self) -> usize {
        self.per_batch.len()
    }

    pub fn update(&mut self, batch: &[Sample<T>], rng: &mut impl Rng) {
        let take = self.quota.min(batch.len());
        let kept = if take == 0 {
            Vec::new()
        } else {
            let mut idx = index::sample(rng, batch.len(), take).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| batch[i].clone()).collect()
        };
        self.per_batch.push(kept);
    }
}

impl<T> ReplayMemory<T> for GrowingMemory<T> {
    fn items(&self) -> Vec<&Sample<T>> {
        self.per_batch.iter().flatten().collect()
    }
    fn len(&self) -> usize {
        self.per_batch.iter().map(Vec::len).sum()
    }
}

/// Per-task exemplar stores sharing a fixed budget `N`; after task `i` every
/// store holds at most `floor(N / (i + 1))` items.
#[derive(Debug, Clone, PartialEq)]
pub struct QuotaMemory<T> {
    budget: usize,
    stores: Vec<Vec<Sample<T>>>,
}

impl<T: Clone> QuotaMemory<T> {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            stores: Vec::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn task_count(&self) -> usize {
        self.stores.len()
    }

    pub fn store(&self, task: usize) -> Option<&[Sample<T>]> {
        self.stores.get(task).map(Vec::as_slice)
    }

    pub fn store_sizes(&self) -> Vec<usize> {
        self.stores.iter().map(Vec::len).collect()
    }

    /// Down-samples existing stores to the new quota (dropped items are gone
    /// for good) and stores a random quota of the new task's samples.
    pub fn rebalance(&mut self, task: usize, samples: &[Sample<T>], rng: &mut impl Rng) -> Result<()> {
        if task != self.stores.len() {
            return Err(Error::Precondition(format!(
                "task ids must be consecutive: expected {}, got {task}",
                self.stores.len()
            )));
        }
        let quota = self.budget / (task + 1);
        for store in &mut self.stores {
            if store.len() > quota {
                let mut keep = index::sample(rng, store.len(), quota).into_vec();
                keep.sort_unstable();
                let old = std::mem::take(store);
                *store = keep.into_iter().map(|i| old[i].clone()).collect();
            }
        }
        let take = quota.min(samples.len());
        let new_store = if take == 0 {
            Vec::new()
        } else {
            let mut idx = index::sample(rng, samples.len(), take).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| samples[i].clone()).collect()
        };
        self.stores.push(new_store);
        Ok(())
    }
}

impl<T> ReplayMemory<T> for QuotaMemory<T> {
    fn items(&self) -> Vec<&Sample<T>> {
        self.stores.iter().flatten().collect()
    }
    fn len(&self) -> usize {
        self.stores.iter().map(Vec::len).sum()
    }
}

/// Dumps items to the CLB1 memory payload: `u8` scalar width, `u32` feature
/// width, `u32` count, then per item the features, `u32` label, `u32` task.
pub fn dump<T: Real>(items: &[&Sample<T>]) -> Result<Vec<u8>> {
    let width = scalar_bytes::<T>();
    let dim = items.first().map_or(0, |s| s.features.len());
    if items.iter().any(|s| s.features.len() != dim) {
        return Err(Error::Shape("memory items differ in width".into()));
    }
    let mut w = Writer::with_header(PayloadKind::Memory);
    w.put_u8(width as u8);
    w.put_len(dim)?;
    w.put_len(items.len())?;
    for s in items {
        for &v in &s.features {
            put_scalar(&mut w, v, width);
        }
        w.put_u32(s.label);
        w.put_u32(s.task.unwrap_or(NO_TASK));
    }
    Ok(w.into_bytes())
}

pub fn load_dump<T: Real>(bytes: &[u8]) -> Result<Vec<Sample<T>>> {
    let mut r = Reader::open(bytes, PayloadKind::Memory)?;
    let width = r.u8()? as usize;
    if width != scalar_bytes::<T>() {
        return Err(Error::Format(format!("dump holds {width}-byte scalars")));
    }
    let dim = r.u32()? as usize;
    let n = r.len(dim * width + 8)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let features = (0..dim)
            .map(|_| get_scalar(&mut r, width))
            .collect::<Result<Vec<T>>>()?;
        let label = r.u32()?;
        let task = r.u32()?;
        out.push(Sample {
            features,
            label,
            task: (task != NO_TASK).then_some(task),
        });
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(i: u32) -> Sample<f64> {
        Sample {
            features: vec![i as f64; 4],
            label: i,
            task: None,
        }
    }

    #[test]
    fn reservoir_warm_up_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ReservoirMemory::new(5);
        for i in 0..5 {
            m.update(item(i), &mut rng);
            assert_eq!(m.len(), i as usize + 1);
        }
        let labels: Vec<u32> = m.stored().iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        for i in 5..100 {
            m.update(item(i), &mut rng);
            assert!(m.len() <= 5);
        }
        assert_eq!(m.seen(), 100);
    }

    #[test]
    fn zero_capacity_reservoir_stays_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ReservoirMemory::new(0);
        for i in 0..10 {
            m.update(item(i), &mut rng);
        }
        assert!(m.is_empty());
    }

    #[test]
    fn growing_memory_quota() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<_> = (0..50).map(item).collect();
        let mut m = GrowingMemory::new(20);
        for _ in 0..8 {
            m.update(&batch, &mut rng);
        }
        assert_eq!(m.len(), 160);
        let mut z = GrowingMemory::new(0);
        z.update(&batch, &mut rng);
        assert!(z.is_empty());
        let mut small = GrowingMemory::new(20);
        small.update(&batch[..5], &mut rng);
        assert_eq!(small.len(), 5);
    }

    #[test]
    fn quota_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let task: Vec<_> = (0..200).map(item).collect();
        let mut m = QuotaMemory::new(90);
        m.rebalance(0, &task, &mut rng).unwrap();
        assert_eq!(m.store_sizes(), vec![90]);
        m.rebalance(1, &task, &mut rng).unwrap();
        assert_eq!(m.store_sizes(), vec![45, 45]);
        assert!(m.rebalance(3, &task, &mut rng).is_err());
    }

    #[test]
    fn sample_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = ReservoirMemory::new(10);
        assert!(m.sample(3, &mut rng).is_empty());
        for i in 0..10 {
            m.update(item(i), &mut rng);
        }
        assert!(m.sample(0, &mut rng).is_empty());
        let mut all: Vec<u32> = m.sample(25, &mut rng).iter().map(|s| s.label).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let with = sample_from(&m.items(), 25, SampleMode::WithReplacement, &mut rng);
        assert_eq!(with.len(), 25);
    }

    #[test]
    fn byte_accounting() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = ReservoirMemory::new(1000);
        for i in 0..1000 {
            m.update(
                Sample {
                    features: vec![0.0f64; 64],
                    label: i,
                    task: None,
                },
                &mut rng,
            );
        }
        assert_eq!(m.size_bytes(), 512_000);
    }

    #[test]
    fn dump_round_trip() {
        let items: Vec<_> = (0..3).map(item).collect();
        let refs: Vec<_> = items.iter().collect();
        let bytes = dump(&refs).unwrap();
        assert_eq!(load_dump::<f64>(&bytes).unwrap(), items);
        assert!(load_dump::<f32>(&bytes).is_err());
        assert!(load_dump::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }
}
