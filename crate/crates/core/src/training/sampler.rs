use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::raster::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Real,
}

/// N matched pairs; `texts[i]` and `images[i]` belong together.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<X, Y> {
    pub texts: Vec<X>,
    pub images: Vec<Y>,
    pub provenance: Vec<Provenance>,
}

impl<X, Y> Batch<X, Y> {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&x| x == p).count()
    }
}

/// Generated items per batch: floor(r * N), with a tiny tolerance so that
/// ratios like 0.29 * 100 are not floored to 28 by rounding error.
pub fn generated_share(n: usize, r: f64) -> usize {
    ((r * n as f64) + 1e-9).floor().clamp(0.0, n as f64) as usize
}

#[derive(Debug, Clone)]
struct PoolCursor {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: ChaCha8Rng,
    name: &'static str,
}

impl PoolCursor {
    fn new(len: usize, seed: u64, name: &'static str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            epoch: 0,
            rng,
            name,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
            log::debug!("{} pool exhausted; reshuffled for pass {}", self.name, self.epoch);
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Endless stream of batches mixing generated and real pairs.
///
/// Each pool is walked in a seeded random order without replacement and
/// reshuffled when exhausted. Generated items come first within a batch.
#[derive(Debug, Clone)]
pub struct MixedBatchSampler<X, Y> {
    generated: Vec<(X, Y)>,
    real: Vec<(X, Y)>,
    n: usize,
    n_generated: usize,
    gen_cursor: PoolCursor,
    real_cursor: PoolCursor,
}

impl<X: Clone, Y: Clone> MixedBatchSampler<X, Y> {
    pub fn new(generated: Vec<(X, Y)>, real: Vec<(X, Y)>, n: usize, r: f64, seed: u64) -> Result<Self, TrainError> {
        if n == 0 {
            return Err(TrainError::EmptyBatch);
        }
        if !(0.0..=1.0).contains(&r) {
            return Err(TrainError::MixRatio(r));
        }
        let n_generated = generated_share(n, r);
        if n_generated > 0 && generated.is_empty() {
            return Err(TrainError::EmptyPool("generated"));
        }
        if n_generated < n && real.is_empty() {
            return Err(TrainError::EmptyPool("real"));
        }
        let gen_cursor = PoolCursor::new(generated.len(), derive_seed(&[&seed.to_le_bytes(), b"generated"]), "generated");
        let real_cursor = PoolCursor::new(real.len(), derive_seed(&[&seed.to_le_bytes(), b"real"]), "real");
        Ok(Self {
            generated,
            real,
            n,
            n_generated,
            gen_cursor,
            real_cursor,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn generated_per_batch(&self) -> usize {
        self.n_generated
    }

    pub fn real_per_batch(&self) -> usize {
        self.n - self.n_generated
    }

    /// Batches needed to visit every pooled pair about once.
    pub fn batches_per_epoch(&self) -> usize {
        (self.generated.len() + self.real.len()).div_ceil(self.n).max(1)
    }

    pub fn next_batch(&mut self) -> Batch<X, Y> {
        let mut batch = Batch {
            texts: Vec::with_capacity(self.n),
            images: Vec::with_capacity(self.n),
            provenance: Vec::with_capacity(self.n),
        };
        for _ in 0..self.n_generated {
            let (x, y) = &self.generated[self.gen_cursor.next()];
            batch.texts.push(x.clone());
            batch.images.push(y.clone());
            batch.provenance.push(Provenance::Generated);
        }
        for _ in self.n_generated..self.n {
            let (x, y) = &self.real[self.real_cursor.next()];
            batch.texts.push(x.clone());
            batch.images.push(y.clone());
            batch.provenance.push(Provenance::Real);
        }
        batch
    }
}

impl<X: Clone, Y: Clone> Iterator for MixedBatchSampler<X, Y> {
    type Item = Batch<X, Y>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn pool(tag: u32, n: u32) -> Vec<(u32, u32)> {
        (0..n).map(|i| (tag * 1000 + i, tag * 1000 + i)).collect()
    }

    #[test]
    fn default_recipe_splits_evenly() {
        let mut s = MixedBatchSampler::new(pool(1, 500), pool(2, 500), 400, 0.5, 0).unwrap();
        let b = s.next_batch();
        assert_eq!((b.count(Provenance::Generated), b.count(Provenance::Real)), (200, 200));
    }

    #[test]
    fn zero_ratio_is_all_real() {
        let mut s = MixedBatchSampler::new(Vec::new(), pool(2, 30), 10, 0.0, 0).unwrap();
        assert!(s.next_batch().provenance.iter().all(|p| *p == Provenance::Real));
    }

    #[test]
    fn floor_rule() {
        assert_eq!(generated_share(10, 0.33), 3);
        assert_eq!(generated_share(100, 0.29), 29);
        assert_eq!(generated_share(7, 1.0), 7);
    }

    #[test]
    fn without_replacement_within_a_pass() {
        let mut s = MixedBatchSampler::new(pool(1, 12), pool(2, 12), 6, 0.5, 4).unwrap();
        let mut seen = HashSet::new();
        for _ in 0..4 {
            for t in s.next_batch().texts {
                assert!(seen.insert(t));
            }
        }
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn empty_pool_with_share_is_error() {
        assert!(matches!(
            MixedBatchSampler::<u32, u32>::new(Vec::new(), pool(2, 3), 4, 0.5, 0),
            Err(TrainError::EmptyPool("generated"))
        ));
    }

    proptest! {
        #[test]
        fn exact_composition_and_determinism(n in 1usize..64, k in 0u32..=1000, seed in any::<u64>()) {
            let r = f64::from(k) / 1000.0;
            let expected = (k as usize * n) / 1000;
            let make = || MixedBatchSampler::new(pool(1, 5), pool(2, 7), n, r, seed).unwrap();
            let (mut a, mut b) = (make(), make());
            for _ in 0..3 {
                let (x, y) = (a.next_batch(), b.next_batch());
                prop_assert_eq!(x.count(Provenance::Generated), expected);
                prop_assert_eq!(x.len(), n);
                prop_assert_eq!(x, y);
            }
        }
    }
}
