use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// `P` classes times `K` samples per modality; `batch_size = 2 P K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub classes_per_batch: usize,
    pub samples_per_class_per_modality: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            classes_per_batch: 8,
            samples_per_class_per_modality: 4,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let (p, k) = (self.classes_per_batch, self.samples_per_class_per_modality);
        if k < 2 {
            return Err(Error::Config("sampler: K must be at least 2".into()));
        }
        if p < 2 {
            return Err(Error::Config("sampler: P must be at least 2".into()));
        }
        if self.batch_size != 2 * p * k {
            return Err(Error::Config(format!(
                "sampler: batch_size {} != 2 * P({p}) * K({k})",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Class-balanced, modality-balanced batch stream over one dataset.
///
/// Within a batch each class contributes its `K` modality-A samples followed
/// by its `K` modality-B samples.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    cfg: SamplerConfig,
    /// `(class, A indices, B indices)` for classes with at least `K` per modality.
    pools: Vec<(u32, Vec<usize>, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(ds: &Dataset, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.samples_per_class_per_modality;
        let pools: Vec<_> = ds
            .index()
            .into_iter()
            .filter(|(_, [a, b])| a.len() >= k && b.len() >= k)
            .map(|(c, [a, b])| (c, a, b))
            .collect();
        if pools.len() < cfg.classes_per_batch {
            return Err(Error::Infeasible(format!(
                "need {} classes with >= {k} samples in each modality, dataset has {}",
                cfg.classes_per_batch,
                pools.len()
            )));
        }
        Ok(Self { cfg, pools })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// All batches of one epoch; no sample appears twice.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = self.epoch_rng(epoch);
        let (p, k) = (self.cfg.classes_per_batch, self.cfg.samples_per_class_per_modality);
        let mut chunks: Vec<Vec<(Vec<usize>, Vec<usize>)>> = self
            .pools
            .iter()
            .map(|(_, a, b)| {
                let (mut a, mut b) = (a.clone(), b.clone());
                a.shuffle(&mut rng);
                b.shuffle(&mut rng);
                a.chunks_exact(k)
                    .zip(b.chunks_exact(k))
                    .map(|(x, y)| (x.to_vec(), y.to_vec()))
                    .collect()
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut live: Vec<usize> = (0..chunks.len()).filter(|&c| !chunks[c].is_empty()).collect();
            if live.len() < p {
                break;
            }
            live.shuffle(&mut rng);
            live.sort_by_key(|&c| std::cmp::Reverse(chunks[c].len()));
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            for &c in &live[..p] {
                let (a, b) = chunks[c].pop().expect("live class");
                batch.extend(a);
                batch.extend(b);
            }
            batches.push(batch);
        }
        batches
    }

    /// One independent batch drawn with replacement across calls.
    pub fn sample_batch(&self, rng: &mut impl Rng) -> Vec<usize> {
        let (p, k) = (self.cfg.classes_per_batch, self.cfg.samples_per_class_per_modality);
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for (_, a, b) in self.pools.choose_multiple(rng, p) {
            batch.extend(a.choose_multiple(rng, k));
            batch.extend(b.choose_multiple(rng, k));
        }
        batch
    }
}
