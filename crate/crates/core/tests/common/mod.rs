#![allow(dead_code)]

use proptest::prelude::*;
use uchfr_core::data::Modality;
use uchfr_core::losses::LabeledBatch;
use uchfr_core::Tensor;

/// A batch of unit rows, `k` samples per modality for each of `p` classes.
pub fn unit_batch(p: usize, k: usize, d: usize, raw: &[f64], ids: &[u32]) -> LabeledBatch<f64> {
    let b = 2 * p * k;
    let mut rows = Vec::with_capacity(b * d);
    for r in raw.chunks_exact(d).take(b) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        rows.extend(r.iter().map(|v| v / n));
    }
    let mut class_ids = Vec::with_capacity(b);
    let mut modalities = Vec::with_capacity(b);
    for &c in ids.iter().take(p) {
        for m in [Modality::A, Modality::B] {
            for _ in 0..k {
                class_ids.push(c);
                modalities.push(m);
            }
        }
    }
    LabeledBatch::new(Tensor::new(vec![b, d], rows).unwrap(), class_ids, modalities).unwrap()
}

/// Random sampler-shaped batches: 2..=5 classes, 1..=3 per modality, d in 2..=6.
pub fn batches() -> impl Strategy<Value = LabeledBatch<f64>> {
    (2usize..=5, 1usize..=3, 2usize..=6).prop_flat_map(|(p, k, d)| {
        let b = 2 * p * k;
        (
            prop::collection::vec(-1.0f64..1.0, b * d),
            Just(prop::sample::subsequence((0u32..40).collect::<Vec<_>>(), p)),
        )
            .prop_flat_map(move |(raw, ids)| (Just(raw), ids))
            .prop_map(move |(raw, ids)| unit_batch(p, k, d, &raw, &ids))
    })
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn cos_dist(u: &[f64], v: &[f64]) -> f64 {
    1.0 - dot(u, v)
}

pub fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

pub struct Oracle {
    pub rows: Vec<Vec<f64>>,
    pub ids: Vec<u32>,
    pub mods: Vec<Modality>,
}

impl Oracle {
    pub fn new(batch: &LabeledBatch<f64>) -> Self {
        let d = batch.embeddings.shape()[1];
        Self {
            rows: batch.embeddings.data().chunks(d).map(<[f64]>::to_vec).collect(),
            ids: batch.class_ids.clone(),
            mods: batch.modalities.clone(),
        }
    }

    fn mean(&self, c: u32) -> Vec<f64> {
        let members: Vec<&Vec<f64>> = self.rows.iter().zip(&self.ids).filter(|(_, &i)| i == c).map(|(r, _)| r).collect();
        let mut m = vec![0.0; self.rows[0].len()];
        for r in &members {
            for (s, v) in m.iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        m.iter().map(|s| s / members.len() as f64).collect()
    }

    fn classes(&self) -> Vec<u32> {
        let mut c = self.ids.clone();
        c.sort();
        c.dedup();
        c
    }

    pub fn positives(&self, a: usize) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&p| self.ids[p] == self.ids[a] && self.mods[p] != self.mods[a])
            .collect()
    }

    pub fn negatives(&self, a: usize) -> Vec<usize> {
        (0..self.ids.len()).filter(|&n| self.ids[n] != self.ids[a]).collect()
    }

    /// `(D(a, own mean), D(a, nearest other mean))`, lowest class id on ties.
    pub fn mean_pair(&self, a: usize) -> (f64, f64) {
        let own = cos_dist(&self.rows[a], &self.mean(self.ids[a]));
        let mut best = f64::INFINITY;
        for c in self.classes() {
            if c != self.ids[a] {
                best = best.min(cos_dist(&self.rows[a], &self.mean(c)));
            }
        }
        (own, best)
    }

    /// Mean hinge over the (positive, negative) pairs of one anchor.
    pub fn anchor_triplet(&self, a: usize, alpha: f64) -> f64 {
        let (ps, ns) = (self.positives(a), self.negatives(a));
        let mut s = 0.0;
        for &p in &ps {
            for &n in &ns {
                s += hinge(cos_dist(&self.rows[a], &self.rows[p]) - cos_dist(&self.rows[a], &self.rows[n]) + alpha);
            }
        }
        s / (ps.len() * ns.len()) as f64
    }

    pub fn triplet(&self, alpha: f64) -> f64 {
        let b = self.ids.len();
        (0..b).map(|a| self.anchor_triplet(a, alpha)).sum::<f64>() / b as f64
    }

    pub fn class_mean(&self, alpha: f64) -> f64 {
        let b = self.ids.len();
        (0..b)
            .map(|a| {
                let (own, neg) = self.mean_pair(a);
                hinge(own - neg + alpha)
            })
            .sum::<f64>()
            / b as f64
    }

    pub fn unit_class(&self, alpha: f64, beta: f64) -> f64 {
        let b = self.ids.len();
        let mut total = 0.0;
        for a in 0..b {
            let (own, neg_mean) = self.mean_pair(a);
            let (ps, ns) = (self.positives(a), self.negatives(a));
            let mut s = 0.0;
            for &p in &ps {
                for &n in &ns {
                    let gap = cos_dist(&self.rows[a], &self.rows[p]) - cos_dist(&self.rows[a], &self.rows[n]);
                    s += hinge((1.0 - beta) * (own - neg_mean) + beta * gap + alpha);
                }
            }
            total += s / (ps.len() * ns.len()) as f64;
        }
        total / b as f64
    }
}

/// Top-1 by exhaustive scan; ties go to the lower gallery index.
pub fn rank1_oracle(scores: &[f64], probes: &[u32], gallery: &[u32]) -> f64 {
    let ng = gallery.len();
    let mut hits = 0;
    for (p, &c) in probes.iter().enumerate() {
        let row = &scores[p * ng..(p + 1) * ng];
        let mut best = 0;
        for g in 1..ng {
            if row[g] > row[best] {
                best = g;
            }
        }
        hits += usize::from(gallery[best] == c);
    }
    hits as f64 / probes.len() as f64
}

/// Best TPR over every threshold whose false accepts stay within `target`.
pub fn tpr_oracle(scores: &[f64], genuine: &[bool], target: f64) -> Option<f64> {
    let n_gen = genuine.iter().filter(|&&g| g).count();
    let n_imp = genuine.len() - n_gen;
    if (n_imp as f64) * target < 1.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    let mut best: Option<f64> = None;
    for t in thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&s, &g) in scores.iter().zip(genuine) {
            if s >= t {
                if g {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if fp as f64 <= target * n_imp as f64 {
            let tpr = tp as f64 / n_gen as f64;
            best = Some(best.map_or(tpr, |b: f64| b.max(tpr)));
        }
    }
    best
}
