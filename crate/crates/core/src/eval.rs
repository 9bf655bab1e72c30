//! Identification and verification metrics for a gallery of modality-A
//! samples probed with modality-B samples, under three scoring modes:
//! embedding cosine similarity, discriminator probability, and their fusion.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Checkpoint, Network, Provenance, Stage};
use crate::cmd;
use crate::data::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Modality-A samples enrolled per class (first ones in dataset order).
    pub gallery_per_class: usize,
    /// Length of the reported CMC curve; 0 disables it.
    pub cmc_ranks: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gallery_per_class: 1,
            cmc_ranks: 0,
        }
    }
}

/// Gallery and probe sample indices into a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub gallery: Vec<usize>,
    pub probes: Vec<usize>,
    pub gallery_classes: Vec<u32>,
    pub probe_classes: Vec<u32>,
}

impl Protocol {
    /// Gallery from modality A, probes from every modality-B sample. Every
    /// pair of one probe and one gallery entry is a verification pair.
    pub fn build(ds: &Dataset, cfg: &EvalConfig) -> Result<Self> {
        if cfg.gallery_per_class == 0 {
            return Err(Error::Config("gallery_per_class must be positive".into()));
        }
        ds.check_both_modalities()?;
        let mut p = Protocol {
            gallery: Vec::new(),
            probes: Vec::new(),
            gallery_classes: Vec::new(),
            probe_classes: Vec::new(),
        };
        for (c, [a, b]) in ds.index() {
            for &i in a.iter().take(cfg.gallery_per_class) {
                p.gallery.push(i);
                p.gallery_classes.push(c);
            }
            for &i in &b {
                p.probes.push(i);
                p.probe_classes.push(c);
            }
        }
        debug_assert!(p.gallery.iter().all(|&i| ds.modalities[i] == Modality::A));
        Ok(p)
    }

    pub fn n_pairs(&self) -> usize {
        self.gallery.len() * self.probes.len()
    }

    /// Same-class flags for the probe-major pair matrix.
    pub fn pair_labels(&self) -> Vec<bool> {
        self.probe_classes
            .iter()
            .flat_map(|&p| self.gallery_classes.iter().map(move |&g| g == p))
            .collect()
    }
}

fn check_matrix(scores: &[f64], probe_classes: &[u32], gallery_classes: &[u32]) -> Result<usize> {
    let (np, ng) = (probe_classes.len(), gallery_classes.len());
    if np == 0 || ng == 0 {
        return Err(Error::InvalidArgument("empty gallery or probe set".into()));
    }
    if scores.len() != np * ng {
        return Err(Error::Shape(format!("{} scores for {np} probes x {ng} gallery", scores.len())));
    }
    Ok(ng)
}

/// 1-based rank of the first correct gallery entry when the row is ordered
/// by descending score, ties broken by lower gallery index.
fn first_hit(row: &[f64], gallery_classes: &[u32], class: u32) -> Option<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.iter().position(|&g| gallery_classes[g] == class).map(|p| p + 1)
}

/// Fraction of probes whose top-scoring gallery entry has their class.
/// `scores` is probe-major, `[probes x gallery]`.
pub fn rank1(scores: &[f64], probe_classes: &[u32], gallery_classes: &[u32]) -> Result<f64> {
    let ng = check_matrix(scores, probe_classes, gallery_classes)?;
    let hits = scores
        .chunks_exact(ng)
        .zip(probe_classes)
        .filter(|(row, &c)| {
            let mut best = 0;
            for (g, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = g;
                }
            }
            gallery_classes[best] == c
        })
        .count();
    Ok(hits as f64 / probe_classes.len() as f64)
}

/// Cumulative match characteristic for ranks `1..=max_rank`.
pub fn cmc(scores: &[f64], probe_classes: &[u32], gallery_classes: &[u32], max_rank: usize) -> Result<Vec<f64>> {
    let ng = check_matrix(scores, probe_classes, gallery_classes)?;
    let mut counts = vec![0usize; max_rank];
    for (row, &c) in scores.chunks_exact(ng).zip(probe_classes) {
        if let Some(r) = first_hit(row, gallery_classes, c) {
            counts.iter_mut().skip(r - 1).for_each(|n| *n += 1);
        }
    }
    let n = probe_classes.len() as f64;
    Ok(counts.into_iter().map(|k| k as f64 / n).collect())
}

/// One operating point: accept a pair when its score is at least `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `+inf` for the reject-all point.
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub far: f64,
    pub tpr: f64,
    pub tp: usize,
    pub fp: usize,
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &f64, s: S) -> Result<S::Ok, S::Error> {
        if t.is_finite() {
            s.serialize_f64(*t)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Threshold sweep over the distinct scores, from reject-all `(0, 0)` to
/// accept-all `(1, 1)`.
pub fn roc(scores: &[f64], genuine: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != genuine.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), genuine.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    let n_gen = genuine.iter().filter(|&&g| g).count();
    let n_imp = genuine.len() - n_gen;
    if n_gen == 0 || n_imp == 0 {
        return Err(Error::InvalidArgument(
            "ROC needs at least one genuine and one imposter pair".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        tpr: 0.0,
        tp: 0,
        fp: 0,
    }];
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if genuine[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: t,
            far: fp as f64 / n_imp as f64,
            tpr: tp as f64 / n_gen as f64,
            tp,
            fp,
        });
    }
    Ok(points)
}

/// Largest TPR among points with `FAR <= target`, without interpolation.
/// `None` when there are too few imposter pairs to resolve `target`.
pub fn tpr_at_far(points: &[RocPoint], target: f64) -> Option<f64> {
    let last = points.last()?;
    let n_imp = last.fp;
    if (n_imp as f64) * target < 1.0 {
        return None;
    }
    points
        .iter()
        .filter(|p| p.fp as f64 <= target * n_imp as f64)
        .map(|p| p.tpr)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
}

/// Cosine similarity mapped onto `[0, 1]`.
pub fn embd_score(cos: f64) -> f64 {
    (1.0 + cos) / 2.0
}

/// Mean of an embedding score already on `[0, 1]` and a discriminator probability.
pub fn fuse(embd: f64, cmd_prob: f64) -> f64 {
    (embd + cmd_prob) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Embd,
    #[serde(rename = "CMD")]
    Cmd,
    Fusion,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Embd => "Embd",
            Mode::Cmd => "CMD",
            Mode::Fusion => "Fusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub rank1: f64,
    pub tpr_at_far_1pct: Option<f64>,
    pub tpr_at_far_0p1pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmc: Option<Vec<f64>>,
    pub roc: Vec<RocPoint>,
}

impl ModeReport {
    pub fn compute(mode: Mode, scores: &[f64], protocol: &Protocol, cfg: &EvalConfig) -> Result<Self> {
        let roc = roc(scores, &protocol.pair_labels())?;
        Ok(Self {
            mode,
            rank1: rank1(scores, &protocol.probe_classes, &protocol.gallery_classes)?,
            tpr_at_far_1pct: tpr_at_far(&roc, 0.01),
            tpr_at_far_0p1pct: tpr_at_far(&roc, 0.001),
            cmc: match cfg.cmc_ranks {
                0 => None,
                r => Some(cmc(scores, &protocol.probe_classes, &protocol.gallery_classes, r)?),
            },
            roc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modes: Vec<ModeReport>,
    pub n_pairs: usize,
    pub n_genuine: usize,
    pub n_imposter: usize,
    pub n_subjects: usize,
    pub n_probes: usize,
    pub n_gallery: usize,
    pub provenance: Provenance,
}

pub const CSV_HEADER: &str = "mode,rank1,tpr_far_1pct,tpr_far_0p1pct,n_pairs,n_subjects";

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl EvalReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for m in &self.modes {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                m.mode.label(),
                m.rank1,
                fmt_opt(m.tpr_at_far_1pct),
                fmt_opt(m.tpr_at_far_0p1pct),
                self.n_pairs,
                self.n_subjects
            )
            .unwrap();
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let json_path = stem.with_extension("json");
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        let csv_path = stem.with_extension("csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))
    }
}

fn embed_rows<T: Real>(net: &Network<T>, ds: &Dataset, idx: &[usize]) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let e = net.embed(&ds.batch::<T>(chunk))?;
        out.extend((0..chunk.len()).map(|i| e.row(i).to_vec()));
    }
    Ok(out)
}

/// Scores every probe against every gallery entry in all available modes.
pub fn evaluate<T: Real>(net: &Network<T>, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if net.stage() != Stage::Hfr {
        return Err(Error::Stage {
            expected: Stage::Hfr.to_string(),
            found: net.stage().to_string(),
        });
    }
    let protocol = Protocol::build(test, cfg)?;
    let gallery = embed_rows(net, test, &protocol.gallery)?;
    let probes = embed_rows(net, test, &protocol.probes)?;
    let cos: Vec<f64> = probes
        .iter()
        .flat_map(|p| {
            gallery
                .iter()
                .map(move |g| p.iter().zip(g).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum::<f64>())
        })
        .collect();
    let mut modes = vec![ModeReport::compute(Mode::Embd, &cos, &protocol, cfg)?];
    if net.cmd.is_some() {
        let mut forward = Vec::with_capacity(cos.len());
        let mut backward = Vec::with_capacity(cos.len());
        for p in &probes {
            for g in &gallery {
                forward.push((p.as_slice(), g.as_slice()));
                backward.push((g.as_slice(), p.as_slice()));
            }
        }
        let s1 = cmd::cmd_score_many(&forward, &net.params)?;
        let s2 = cmd::cmd_score_many(&backward, &net.params)?;
        let cmd_scores: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| (a.as_f64() + b.as_f64()) / 2.0).collect();
        let fused: Vec<f64> = cos.iter().zip(&cmd_scores).map(|(&c, &p)| fuse(embd_score(c), p)).collect();
        modes.push(ModeReport::compute(Mode::Cmd, &cmd_scores, &protocol, cfg)?);
        modes.push(ModeReport::compute(Mode::Fusion, &fused, &protocol, cfg)?);
    }
    let labels = protocol.pair_labels();
    let n_genuine = labels.iter().filter(|&&l| l).count();
    Ok(EvalReport {
        modes,
        n_pairs: labels.len(),
        n_genuine,
        n_imposter: labels.len() - n_genuine,
        n_subjects: protocol.gallery_classes.iter().collect::<std::collections::BTreeSet<_>>().len(),
        n_probes: protocol.probes.len(),
        n_gallery: protocol.gallery.len(),
        provenance: Provenance::default(),
    })
}

/// [`evaluate`] in the precision the checkpoint was saved in.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut report = match ckpt.dtype() {
        Some(DType::F32) => evaluate(&Network::<f32>::from_checkpoint(ckpt)?, test, cfg)?,
        _ => evaluate(&Network::<f64>::from_checkpoint(ckpt)?, test, cfg)?,
    };
    report.provenance = ckpt.provenance.clone();
    Ok(report)
}

/// Rank-1 of nearest-neighbour matching on raw features (negative Euclidean distance).
pub fn raw_feature_rank1(test: &Dataset, cfg: &EvalConfig) -> Result<f64> {
    let protocol = Protocol::build(test, cfg)?;
    let scores: Vec<f64> = protocol
        .probes
        .iter()
        .flat_map(|&p| {
            protocol.gallery.iter().map(move |&g| {
                -test
                    .features
                    .row(p)
                    .iter()
                    .zip(test.features.row(g))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect();
    rank1(&scores, &protocol.probe_classes, &protocol.gallery_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank1_cases() {
        // probe 0 matches gallery 0 exactly, others orthogonal
        let s = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(rank1(&s, &[7, 8], &[7, 8, 9]).unwrap(), 1.0);
        // tie goes to the lower gallery index
        assert_eq!(rank1(&[0.5, 0.5], &[2], &[1, 2]).unwrap(), 0.0);
        assert_eq!(rank1(&[0.5, 0.5], &[1], &[1, 2]).unwrap(), 1.0);
        assert!(rank1(&[], &[], &[1]).is_err());
        let c = cmc(&[0.1, 0.9, 0.5], &[3], &[1, 2, 3], 3).unwrap();
        assert_eq!(c, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn roc_separable_and_constant() {
        let pts = roc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!((pts[0].far, pts[0].tpr), (0.0, 0.0));
        assert!(pts.iter().any(|p| p.far == 0.0 && p.tpr == 1.0));
        assert_eq!((pts.last().unwrap().far, pts.last().unwrap().tpr), (1.0, 1.0));

        let flat = roc(&[0.3; 5], &[true, false, true, false, false]).unwrap();
        assert_eq!(flat.len(), 2);
        assert!(flat.iter().all(|p| p.far == p.tpr));
        assert!(roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn tpr_resolution() {
        let mut scores = vec![1.0; 10];
        let mut labels = vec![true; 10];
        scores.extend(vec![0.0; 500]);
        labels.extend(vec![false; 500]);
        let pts = roc(&scores, &labels).unwrap();
        assert_eq!(tpr_at_far(&pts, 0.01), Some(1.0));
        assert_eq!(tpr_at_far(&pts, 0.001), None);
    }

    #[test]
    fn fusion_arithmetic() {
        assert!((fuse(0.8, 0.6) - 0.7).abs() < 1e-15);
        assert_eq!(fuse(embd_score(1.0), 1.0), 1.0);
        assert_eq!(fuse(0.37, 0.37), 0.37);
    }

    #[test]
    fn csv_marks_undefined() {
        let report = EvalReport {
            modes: vec![ModeReport {
                mode: Mode::Embd,
                rank1: 1.0,
                tpr_at_far_1pct: Some(0.5),
                tpr_at_far_0p1pct: None,
                cmc: None,
                roc: vec![],
            }],
            n_pairs: 4,
            n_genuine: 2,
            n_imposter: 2,
            n_subjects: 2,
            n_probes: 2,
            n_gallery: 2,
            provenance: Provenance::default(),
        };
        assert_eq!(report.to_csv(), format!("{CSV_HEADER}\nEmbd,1,0.5,NA,4,2\n"));
    }
}
