use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Sample;

/// Ranges for random image transforms. Every range is symmetric around zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    /// Maximum shift as a fraction of the image side, per axis.
    pub shift_frac: f64,
    pub shear: f64,
    pub brightness: f64,
    pub hflip_prob: f64,
    /// Standard deviation of additive noise for vector-mode samples.
    pub jitter: f64,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

fn symmetric(rng: &mut impl Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

pub fn hflip(pixels: &[f64], side: usize) -> Vec<f64> {
    pixels
        .chunks_exact(side)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

fn bilinear(px: &[f64], side: usize, x: f64, y: f64) -> f64 {
    let max = (side - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(side - 1), (y0 + 1).min(side - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize| px[r * side + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Randomly transforms one sample. Image samples (`side` set) get
/// rotation/shear/shift about the center with edge clamping, brightness
/// shift and horizontal flip; vector samples get optional additive jitter.
pub fn augment(sample: &Sample, side: Option<usize>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let mut features = sample.features.clone();
    match side {
        Some(side) => {
            let angle = symmetric(rng, cfg.rotation_deg).to_radians();
            let shear = symmetric(rng, cfg.shear);
            let tx = symmetric(rng, cfg.shift_frac) * side as f64;
            let ty = symmetric(rng, cfg.shift_frac) * side as f64;
            let bright = symmetric(rng, cfg.brightness);
            let flip = cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob.min(1.0));
            if angle != 0.0 || shear != 0.0 || tx != 0.0 || ty != 0.0 {
                let c = (side as f64 - 1.0) / 2.0;
                let (cos, sin) = (angle.cos(), angle.sin());
                let src = features.clone();
                for r in 0..side {
                    for col in 0..side {
                        // inverse map: output pixel -> source location
                        let (u, v) = (col as f64 - c - tx, r as f64 - c - ty);
                        let u = u - shear * v;
                        let (sx, sy) = (cos * u + sin * v, -sin * u + cos * v);
                        features[r * side + col] = bilinear(&src, side, sx + c, sy + c);
                    }
                }
            }
            if bright != 0.0 {
                features.iter_mut().for_each(|v| *v += bright);
            }
            if flip {
                features = hflip(&features, side);
            }
        }
        None => {
            if cfg.jitter > 0.0 {
                for v in features.iter_mut() {
                    *v += cfg.jitter * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
    Sample {
        features,
        class_id: sample.class_id,
        modality: sample.modality,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Sample {
        Sample {
            features: (0..25).map(|v| v as f64 * 0.1).collect(),
            class_id: 7,
            modality: Modality::B,
        }
    }

    #[test]
    fn zero_ranges_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = img();
        assert_eq!(augment(&s, Some(5), &AugmentConfig::default(), &mut rng), s);
        assert_eq!(augment(&s, None, &AugmentConfig::default(), &mut rng), s);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = img();
        assert_eq!(&s.features[..5], &hflip(&s.features, 5)[..5].iter().rev().copied().collect::<Vec<_>>()[..]);
        assert_eq!(hflip(&hflip(&s.features, 5), 5), s.features);
        let cfg = AugmentConfig { hflip_prob: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&s, Some(5), &cfg, &mut rng);
        assert_eq!(augment(&once, Some(5), &cfg, &mut rng), s);
    }

    #[test]
    fn seeded_stream_and_labels_kept() {
        let cfg = AugmentConfig {
            rotation_deg: 15.0,
            shift_frac: 0.1,
            shear: 0.1,
            brightness: 0.2,
            hflip_prob: 0.5,
            jitter: 0.0,
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..4).map(|_| augment(&img(), Some(5), &cfg, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        assert!(run(1).iter().all(|s| s.class_id == 7 && s.modality == Modality::B));
    }

    #[test]
    fn quarter_turn_of_a_symmetric_grid() {
        let cfg = AugmentConfig { rotation_deg: 90.0, ..Default::default() };
        // the angle is drawn from [-90, 90]; only check the transform stays within the value range
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = augment(&img(), Some(5), &cfg, &mut rng);
        assert!(out.features.iter().all(|&v| (0.0..=2.4 + 1e-12).contains(&v)));
    }
}
