use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Modality, Sample};
use crate::backbone::Provenance;
use crate::config::config_hash;
use crate::error::{Error, Result};

/// Latent-identity generator with a nonlinear, multiplicatively distorted
/// second modality.
///
/// For class `c` with latent `z`:
/// `A = M_A z + e` and `B = tanh(M_B z) * (1 + gamma * tanh(G z)) + e`,
/// where `M_B = rho M_A + sqrt(1 - rho^2) N` and `e ~ N(0, sigma^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class_per_modality: usize,
    pub raw_dim: usize,
    pub latent_dim: usize,
    pub gap_severity: f64,
    pub noise_scale: f64,
    /// Correlation `rho` between the two mixing maps; 1 with `gap_severity = 0`
    /// makes modality B an elementwise squashing of noise-free modality A.
    pub mixing_correlation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 50,
            samples_per_class_per_modality: 4,
            raw_dim: 64,
            latent_dim: 4,
            gap_severity: 2.0,
            noise_scale: 0.1,
            mixing_correlation: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.samples_per_class_per_modality < 2 {
            return bad("samples_per_class_per_modality must be at least 2");
        }
        if self.raw_dim == 0 || self.latent_dim == 0 {
            return bad("raw_dim and latent_dim must be positive");
        }
        if !(self.gap_severity >= 0.0 && self.gap_severity.is_finite()) {
            return bad("gap_severity must be finite and non-negative");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.mixing_correlation) {
            return bad("mixing_correlation must lie in [0, 1]");
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn apply(m: &[f64], z: &[f64]) -> Vec<f64> {
    m.chunks_exact(z.len())
        .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

/// Samples are ordered by class, then modality A before B.
pub fn generate_synth(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (d, l, k) = (cfg.raw_dim, cfg.latent_dim, cfg.samples_per_class_per_modality);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (l as f64).sqrt();
    let m_a = gaussian(&mut rng, d * l, scale);
    let other = gaussian(&mut rng, d * l, scale);
    let rho = cfg.mixing_correlation;
    let m_b: Vec<f64> = m_a
        .iter()
        .zip(&other)
        .map(|(a, o)| rho * a + (1.0 - rho * rho).sqrt() * o)
        .collect();
    let g = gaussian(&mut rng, d * l, scale);

    let mut samples = Vec::with_capacity(cfg.num_classes * 2 * k);
    for c in 0..cfg.num_classes {
        let z = gaussian(&mut rng, l, 1.0);
        let clean_a = apply(&m_a, &z);
        let clean_b: Vec<f64> = apply(&m_b, &z)
            .into_iter()
            .zip(apply(&g, &z))
            .map(|(u, v)| u.tanh() * (1.0 + cfg.gap_severity * v.tanh()))
            .collect();
        for (modality, clean) in [(Modality::A, &clean_a), (Modality::B, &clean_b)] {
            for _ in 0..k {
                let noise = gaussian(&mut rng, d, cfg.noise_scale);
                samples.push(Sample {
                    features: clean.iter().zip(noise).map(|(x, e)| x + e).collect(),
                    class_id: c as u32,
                    modality,
                });
            }
        }
    }
    let mut ds = Dataset::from_samples(samples, None)?;
    ds.provenance = Provenance {
        seed: cfg.seed,
        config_hash: config_hash(cfg)?,
        run_config: serde_json::Value::Null,
    };
    Ok(ds)
}
