//! Triplet, class-mean triplet, and Unit-Class losses over a batch of
//! labeled, modality-tagged embeddings.
//!
//! Mining policy shared by all three:
//! * anchors: every sample in the batch;
//! * positives: same class, other modality;
//! * negatives: any sample of another class;
//! * class means are in-batch averages of the embedding rows (not renormalized);
//! * the negative mean is the off-class mean nearest the anchor (ties: lowest class id).
//!
//! Sample-level terms are averaged over an anchor's `(p, n)` pairs and then
//! over anchors, which equals the flat mean over all triplets whenever each
//! anchor has the same number of triplets (always the case for PK batches).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Graph, Metric, Var};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Margin.
    pub alpha: f64,
    /// Weight of the sample-level gap against the class-mean gap.
    pub beta: f64,
    /// Weight of the metric loss against the discriminator loss.
    pub mu: f64,
    pub distance: Metric,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            mu: 1.0,
            distance: Metric::Cosine,
        }
    }
}

impl LossConfig {
    /// The alternative setting `alpha = 1.6, beta = 0.6`.
    pub fn alternate() -> Self {
        Self {
            alpha: 1.6,
            beta: 0.6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.mu.is_nan() || self.mu < 0.0 {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    ClassMean,
    UnitClass,
}

/// Embeddings `[b, d]` with a class id and modality per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T: Real> {
    pub embeddings: Tensor<T>,
    pub class_ids: Vec<u32>,
    pub modalities: Vec<Modality>,
}

impl<T: Real> LabeledBatch<T> {
    pub fn new(embeddings: Tensor<T>, class_ids: Vec<u32>, modalities: Vec<Modality>) -> Result<Self> {
        if embeddings.rank() != 2
            || embeddings.shape()[0] != class_ids.len()
            || class_ids.len() != modalities.len()
        {
            return Err(Error::Shape(format!(
                "embeddings {:?} with {} ids and {} modalities",
                embeddings.shape(),
                class_ids.len(),
                modalities.len()
            )));
        }
        Ok(Self {
            embeddings,
            class_ids,
            modalities,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Every class has at least two samples and appears in both modalities.
    pub fn satisfies_sampler_contract(&self) -> bool {
        let mut seen: BTreeMap<u32, (usize, bool, bool)> = BTreeMap::new();
        for (&c, &m) in self.class_ids.iter().zip(&self.modalities) {
            let e = seen.entry(c).or_default();
            e.0 += 1;
            match m {
                Modality::A => e.1 = true,
                Modality::B => e.2 = true,
            }
        }
        seen.values().all(|&(n, a, b)| n >= 2 && a && b)
    }
}

/// Distance between two embeddings. Cosine distance is `1 - u.v` and
/// assumes unit-norm inputs.
pub fn distance<T: Real>(u: &[T], v: &[T], metric: Metric) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "distance dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok(match metric {
        Metric::Cosine => T::one() - u.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>(),
        Metric::L2 => u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt(),
    })
}

/// Per-class mean embedding over the batch.
pub fn class_means<T: Real>(batch: &LabeledBatch<T>) -> Result<BTreeMap<u32, Vec<T>>> {
    let d = batch.embeddings.shape()[1];
    let mut acc: BTreeMap<u32, (Vec<T>, usize)> = BTreeMap::new();
    for (i, &c) in batch.class_ids.iter().enumerate() {
        let e = acc.entry(c).or_insert_with(|| (vec![T::zero(); d], 0));
        for (s, &v) in e.0.iter_mut().zip(batch.embeddings.row(i)) {
            *s = *s + v;
        }
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(Error::InvalidArgument("class means of an empty batch".into()));
    }
    Ok(acc
        .into_iter()
        .map(|(c, (sum, n))| {
            let k = T::from_usize(n).unwrap();
            (c, sum.into_iter().map(|v| v / k).collect())
        })
        .collect())
}

/// Index structure derived from class ids and modalities.
#[derive(Debug, Clone)]
pub struct Mining {
    /// Sorted distinct class ids; column order of the class-mean matrix.
    pub classes: Vec<u32>,
    /// Column of each sample's own class.
    pub class_slot: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl Mining {
    pub fn new(class_ids: &[u32], modalities: &[Modality]) -> Result<Self> {
        if class_ids.len() != modalities.len() {
            return Err(Error::Shape("one modality per class id required".into()));
        }
        let mut classes = class_ids.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let class_slot = class_ids
            .iter()
            .map(|c| classes.binary_search(c).unwrap())
            .collect();
        let b = class_ids.len();
        let positives = (0..b)
            .map(|a| {
                (0..b)
                    .filter(|&p| p != a && class_ids[p] == class_ids[a] && modalities[p] != modalities[a])
                    .collect()
            })
            .collect();
        let negatives = (0..b)
            .map(|a| (0..b).filter(|&n| class_ids[n] != class_ids[a]).collect())
            .collect();
        Ok(Self {
            classes,
            class_slot,
            positives,
            negatives,
        })
    }

    fn triplet_anchors(&self) -> Vec<usize> {
        (0..self.class_slot.len())
            .filter(|&a| !self.positives[a].is_empty() && !self.negatives[a].is_empty())
            .collect()
    }

    /// `[C, b]` matrix whose product with the embeddings gives class means.
    fn averaging_matrix<T: Real>(&self) -> Tensor<T> {
        let b = self.class_slot.len();
        let c = self.classes.len();
        let mut counts = vec![0usize; c];
        for &s in &self.class_slot {
            counts[s] += 1;
        }
        Tensor::from_fn(&[c, b], |k| {
            let (row, col) = (k / b, k % b);
            if self.class_slot[col] == row {
                T::one() / T::from_usize(counts[row]).unwrap()
            } else {
                T::zero()
            }
        })
    }

    /// Nearest off-class mean column for `anchor`, plus the gap to the runner-up.
    fn hardest_mean<T: Real>(&self, dsm: &Tensor<T>, anchor: usize) -> (usize, f64) {
        let own = self.class_slot[anchor];
        let row = dsm.row(anchor);
        let mut best: Option<usize> = None;
        let mut second = f64::INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if c == own {
                continue;
            }
            match best {
                Some(b) if v >= row[b] => second = second.min(v.as_f64()),
                Some(b) => {
                    second = row[b].as_f64();
                    best = Some(c);
                }
                None => best = Some(c),
            }
        }
        let best = best.expect("at least two classes");
        (best, second - row[best].as_f64())
    }
}

fn hinge<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

struct TripletHinge {
    mining: Mining,
    anchors: Vec<usize>,
    alpha: f64,
}

impl<T: Real> CustomOp<T> for TripletHinge {
    fn name(&self) -> &'static str {
        "triplet_hinge"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let dss = inputs[0];
        let b = dss.shape()[1];
        let alpha = T::of_f64(self.alpha);
        let mut out = Tensor::zeros(dss.shape());
        let od = out.data_mut();
        let per_anchor = g.item() / T::from_usize(self.anchors.len()).unwrap();
        for &a in &self.anchors {
            let (pos, neg) = (&self.mining.positives[a], &self.mining.negatives[a]);
            let w = per_anchor / T::from_usize(pos.len() * neg.len()).unwrap();
            for &p in pos {
                for &n in neg {
                    let arg = dss.data()[a * b + p] - dss.data()[a * b + n] + alpha;
                    if arg > T::zero() {
                        od[a * b + p] = od[a * b + p] + w;
                        od[a * b + n] = od[a * b + n] - w;
                    }
                }
            }
        }
        vec![Some(out)]
    }
}

struct ClassMeanHinge {
    mining: Mining,
    alpha: f64,
}

impl<T: Real> CustomOp<T> for ClassMeanHinge {
    fn name(&self) -> &'static str {
        "class_mean_hinge"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let dsm = inputs[0];
        let (b, c) = dsm.dims2();
        let alpha = T::of_f64(self.alpha);
        let w = g.item() / T::from_usize(b).unwrap();
        let mut out = Tensor::zeros(dsm.shape());
        for a in 0..b {
            let own = self.mining.class_slot[a];
            let (neg, _) = self.mining.hardest_mean(dsm, a);
            if dsm.data()[a * c + own] - dsm.data()[a * c + neg] + alpha > T::zero() {
                let od = out.data_mut();
                od[a * c + own] = od[a * c + own] + w;
                od[a * c + neg] = od[a * c + neg] - w;
            }
        }
        vec![Some(out)]
    }
}

struct UnitClassHinge {
    mining: Mining,
    anchors: Vec<usize>,
    alpha: f64,
    beta: f64,
}

impl<T: Real> CustomOp<T> for UnitClassHinge {
    fn name(&self) -> &'static str {
        "unit_class_hinge"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (dss, dsm) = (inputs[0], inputs[1]);
        let b = dss.shape()[1];
        let c = dsm.shape()[1];
        let (alpha, beta) = (T::of_f64(self.alpha), T::of_f64(self.beta));
        let keep = T::one() - beta;
        let mut gss = Tensor::zeros(dss.shape());
        let mut gsm = Tensor::zeros(dsm.shape());
        let per_anchor = g.item() / T::from_usize(self.anchors.len()).unwrap();
        for &a in &self.anchors {
            let own = self.mining.class_slot[a];
            let (neg_mean, _) = self.mining.hardest_mean(dsm, a);
            let mean_gap = dsm.data()[a * c + own] - dsm.data()[a * c + neg_mean];
            let (pos, neg) = (&self.mining.positives[a], &self.mining.negatives[a]);
            let w = per_anchor / T::from_usize(pos.len() * neg.len()).unwrap();
            let mut active = T::zero();
            for &p in pos {
                for &n in neg {
                    let gap = dss.data()[a * b + p] - dss.data()[a * b + n];
                    if keep * mean_gap + beta * gap + alpha > T::zero() {
                        let d = gss.data_mut();
                        d[a * b + p] = d[a * b + p] + w * beta;
                        d[a * b + n] = d[a * b + n] - w * beta;
                        active = active + w;
                    }
                }
            }
            let d = gsm.data_mut();
            d[a * c + own] = d[a * c + own] + active * keep;
            d[a * c + neg_mean] = d[a * c + neg_mean] - active * keep;
        }
        vec![Some(gss), Some(gsm)]
    }
}

/// Labels needed to build any of the losses on a tape.
#[derive(Debug, Clone)]
pub struct BatchLabels<'a> {
    pub class_ids: &'a [u32],
    pub modalities: &'a [Modality],
}

fn require_two_classes(m: &Mining) -> Result<()> {
    if m.classes.len() < 2 {
        return Err(Error::InvalidArgument("loss needs at least two classes in the batch".into()));
    }
    Ok(())
}

fn sample_distances<T: Real>(g: &mut Graph<T>, e: Var, metric: Metric) -> Result<Var> {
    g.cross_distance(e, e, metric)
}

fn mean_distances<T: Real>(g: &mut Graph<T>, e: Var, mining: &Mining, metric: Metric) -> Result<Var> {
    let avg = g.constant(mining.averaging_matrix());
    let means = g.matmul(avg, e)?;
    g.cross_distance(e, means, metric)
}

/// Hinge `D(a, p) - D(a, n) + alpha`, averaged per anchor then over anchors.
pub fn triplet_loss_graph<T: Real>(g: &mut Graph<T>, e: Var, labels: &BatchLabels, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let mining = Mining::new(labels.class_ids, labels.modalities)?;
    let anchors = mining.triplet_anchors();
    if anchors.is_empty() {
        return Err(Error::NoValidTriplet);
    }
    let dss = sample_distances(g, e, cfg.distance)?;
    let d = g.value(dss);
    let b = d.shape()[1];
    let alpha = T::of_f64(cfg.alpha);
    let mut total = T::zero();
    let mut kink = f64::INFINITY;
    for &a in &anchors {
        let (pos, neg) = (&mining.positives[a], &mining.negatives[a]);
        let mut s = T::zero();
        for &p in pos {
            for &n in neg {
                let arg = d.data()[a * b + p] - d.data()[a * b + n] + alpha;
                kink = kink.min(arg.as_f64().abs());
                s = s + hinge(arg);
            }
        }
        total = total + s / T::from_usize(pos.len() * neg.len()).unwrap();
    }
    let out = Tensor::scalar(total / T::from_usize(anchors.len()).unwrap());
    g.note_kink(kink);
    Ok(g.custom(
        &[dss],
        out,
        TripletHinge {
            mining,
            anchors,
            alpha: cfg.alpha,
        },
    ))
}

/// Hinge `D(a_c, m_c) - D(a_c, m_n) + alpha` over every anchor, with `m_n`
/// the nearest off-class mean.
pub fn class_mean_triplet_loss_graph<T: Real>(
    g: &mut Graph<T>,
    e: Var,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mining = Mining::new(labels.class_ids, labels.modalities)?;
    require_two_classes(&mining)?;
    let dsm = mean_distances(g, e, &mining, cfg.distance)?;
    let d = g.value(dsm);
    let (b, c) = d.dims2();
    let alpha = T::of_f64(cfg.alpha);
    let mut total = T::zero();
    let mut kink = f64::INFINITY;
    for a in 0..b {
        let own = mining.class_slot[a];
        let (neg, tie_gap) = mining.hardest_mean(d, a);
        let arg = d.data()[a * c + own] - d.data()[a * c + neg] + alpha;
        kink = kink.min(arg.as_f64().abs()).min(tie_gap);
        total = total + hinge(arg);
    }
    let out = Tensor::scalar(total / T::from_usize(b).unwrap());
    g.note_kink(kink);
    Ok(g.custom(&[dsm], out, ClassMeanHinge { mining, alpha: cfg.alpha }))
}

/// Unit-Class loss: per triplet, one hinge over
/// `(1 - beta)(D(a, m_c) - D(a, m_n)) + beta(D(a, p) - D(a, n)) + alpha`.
pub fn unit_class_loss_graph<T: Real>(g: &mut Graph<T>, e: Var, labels: &BatchLabels, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let mining = Mining::new(labels.class_ids, labels.modalities)?;
    let anchors = mining.triplet_anchors();
    if anchors.is_empty() {
        return Err(Error::NoValidTriplet);
    }
    let dss = sample_distances(g, e, cfg.distance)?;
    let dsm = mean_distances(g, e, &mining, cfg.distance)?;
    let (ss, sm) = (g.value(dss), g.value(dsm));
    let b = ss.shape()[1];
    let c = sm.shape()[1];
    let (alpha, beta) = (T::of_f64(cfg.alpha), T::of_f64(cfg.beta));
    let keep = T::one() - beta;
    let mut total = T::zero();
    let mut kink = f64::INFINITY;
    for &a in &anchors {
        let own = mining.class_slot[a];
        let (neg_mean, tie_gap) = mining.hardest_mean(sm, a);
        if cfg.beta < 1.0 {
            kink = kink.min(tie_gap);
        }
        let mean_gap = sm.data()[a * c + own] - sm.data()[a * c + neg_mean];
        let (pos, neg) = (&mining.positives[a], &mining.negatives[a]);
        let mut s = T::zero();
        for &p in pos {
            for &n in neg {
                let gap = ss.data()[a * b + p] - ss.data()[a * b + n];
                let arg = keep * mean_gap + beta * gap + alpha;
                kink = kink.min(arg.as_f64().abs());
                s = s + hinge(arg);
            }
        }
        total = total + s / T::from_usize(pos.len() * neg.len()).unwrap();
    }
    let out = Tensor::scalar(total / T::from_usize(anchors.len()).unwrap());
    g.note_kink(kink);
    Ok(g.custom(
        &[dss, dsm],
        out,
        UnitClassHinge {
            mining,
            anchors,
            alpha: cfg.alpha,
            beta: cfg.beta,
        },
    ))
}

pub fn metric_loss_graph<T: Real>(
    g: &mut Graph<T>,
    kind: LossKind,
    e: Var,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<Var> {
    match kind {
        LossKind::Triplet => triplet_loss_graph(g, e, labels, cfg),
        LossKind::ClassMean => class_mean_triplet_loss_graph(g, e, labels, cfg),
        LossKind::UnitClass => unit_class_loss_graph(g, e, labels, cfg),
    }
}

fn evaluate<T: Real>(batch: &LabeledBatch<T>, cfg: &LossConfig, kind: LossKind) -> Result<T> {
    let mut g = Graph::new();
    let e = g.constant(batch.embeddings.clone());
    let labels = BatchLabels {
        class_ids: &batch.class_ids,
        modalities: &batch.modalities,
    };
    let l = metric_loss_graph(&mut g, kind, e, &labels, cfg)?;
    Ok(g.value(l).item())
}

pub fn triplet_loss<T: Real>(batch: &LabeledBatch<T>, cfg: &LossConfig) -> Result<T> {
    evaluate(batch, cfg, LossKind::Triplet)
}

pub fn class_mean_triplet_loss<T: Real>(batch: &LabeledBatch<T>, cfg: &LossConfig) -> Result<T> {
    evaluate(batch, cfg, LossKind::ClassMean)
}

pub fn unit_class_loss<T: Real>(batch: &LabeledBatch<T>, cfg: &LossConfig) -> Result<T> {
    evaluate(batch, cfg, LossKind::UnitClass)
}
