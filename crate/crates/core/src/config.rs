//! Run configuration and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Metric;
use crate::backbone::{BackboneConfig, InputSpec, Provenance};
use crate::cmd::CmdConfig;
use crate::data::{
    generate_synth, load_image_dir, AugmentConfig, Dataset, FeatureStats, ImageDirConfig, SamplerConfig, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::{LossConfig, LossKind};
use crate::tensor::DType;
use crate::trainer::{HfrOptions, OptimConfig, TrainOptions};

/// SHA-256 of the canonical (sorted-key, compact) JSON form of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Where samples come from. Exactly one of `synth` and `image_dir` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synth: Option<SynthConfig>,
    pub image_dir: Option<ImageDirConfig>,
    /// Highest class ids held out for evaluation.
    pub test_classes: usize,
    /// Standardize features with statistics of the training split.
    pub normalize: bool,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: Some(SynthConfig::default()),
            image_dir: None,
            test_classes: 10,
            normalize: false,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub distance: Metric,
    /// Train the cross-modality discriminator jointly.
    pub use_cmd: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            kind: LossKind::UnitClass,
            alpha: l.alpha,
            beta: l.beta,
            mu: l.mu,
            distance: l.distance,
            use_cmd: true,
        }
    }
}

impl LossSection {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            mu: self.mu,
            distance: self.distance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMatrix {
    /// Three losses with and without the discriminator.
    Losses,
    /// Margin and blend grid for the full method.
    MarginGrid,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub matrix: AblationMatrix,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            matrix: AblationMatrix::Losses,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub loss: LossSection,
    pub cmd: CmdConfig,
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub precision: DType,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            backbone: BackboneConfig {
                embedding_dim: 32,
                ..BackboneConfig::default()
            },
            loss: LossSection::default(),
            cmd: CmdConfig::default(),
            sampler: SamplerConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            seed: 0,
            output_dir: None,
            precision: DType::F32,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synth, &self.data.image_dir) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => return Err(Error::Config("data needs exactly one of `synth` and `image_dir`".into())),
        }
        if let (Some(s), InputSpec::Vector { dim }) = (&self.data.synth, self.backbone.input) {
            if s.raw_dim != dim {
                return Err(Error::Config(format!(
                    "backbone input dim {dim} differs from synthetic raw_dim {}",
                    s.raw_dim
                )));
            }
        }
        self.backbone.validate()?;
        self.loss.loss_config().validate()?;
        self.sampler.validate()?;
        self.optim.validate()?;
        if self.data.test_classes == 0 {
            return Err(Error::Config("test_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            seed: self.seed,
            config_hash: self.hash()?,
            run_config: serde_json::to_value(self)?,
        })
    }

    /// Generates or loads the full dataset, stamped with this config's provenance.
    pub fn build_dataset(&self) -> Result<Dataset> {
        let mut ds = match (&self.data.synth, &self.data.image_dir) {
            (Some(s), _) => generate_synth(s)?,
            (_, Some(d)) => load_image_dir(d)?,
            _ => unreachable!("validated"),
        };
        let p = self.provenance()?;
        ds.provenance.seed = p.seed;
        ds.provenance.config_hash = p.config_hash;
        Ok(ds)
    }

    /// Training and held-out splits, standardized on training statistics when enabled.
    pub fn splits(&self, ds: &Dataset) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = ds.split_by_class(self.data.test_classes)?;
        if self.data.normalize {
            let stats = FeatureStats::compute(&train);
            stats.apply(&mut train);
            stats.apply(&mut test);
        }
        Ok((train, test))
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        let mut o = TrainOptions::new(self.optim, self.sampler, self.seed);
        o.augment = self.data.augment;
        o.provenance = self.provenance()?;
        Ok(o)
    }

    pub fn hfr_options(&self) -> HfrOptions {
        HfrOptions {
            kind: self.loss.kind,
            loss: self.loss.loss_config(),
            cmd: self.loss.use_cmd.then(|| self.cmd.clone()),
        }
    }
}
