//! Two-modality datasets: synthetic generation, image-directory loading,
//! augmentation, and modality-balanced batch sampling.

mod augment;
mod image_dir;
mod sampler;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{AnyTensor, Archive};
use crate::backbone::Provenance;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use augment::{augment, hflip, AugmentConfig};
pub use image_dir::{center_crop_square, load_image_dir, ImageDirConfig};
pub use sampler::{BatchSampler, SamplerConfig};
pub use synth::{generate_synth, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    /// Maps directory names such as `visible` or `thermal` onto a modality.
    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "a" | "vis" | "visible" | "rgb" => Some(Modality::A),
            "b" | "the" | "thermal" | "nir" | "ir" | "infrared" | "lwir" => Some(Modality::B),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::A => f.write_str("A"),
            Modality::B => f.write_str("B"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class_id: u32,
    pub modality: Modality,
}

/// Feature-wise centering and scaling statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn compute(ds: &Dataset) -> Self {
        let (n, d) = ds.features.dims2();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(ds.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(ds.features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let d = self.mean.len();
        for (k, v) in ds.features.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, dim]`, one row per sample.
    pub features: Tensor<f64>,
    pub class_ids: Vec<u32>,
    pub modalities: Vec<Modality>,
    /// Set when rows are flattened `side x side` images.
    pub image_side: Option<usize>,
    pub class_names: Option<Vec<String>>,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    class_ids: Vec<u32>,
    modalities: Vec<Modality>,
    image_side: Option<usize>,
    class_names: Option<Vec<String>>,
    seed: u64,
    config_hash: String,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, image_side: Option<usize>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
        let features = Tensor::from_rows(&rows)?;
        if !features.is_finite() {
            return Err(Error::InvalidArgument("non-finite features".into()));
        }
        Ok(Self {
            features,
            class_ids: samples.iter().map(|s| s.class_id).collect(),
            modalities: samples.iter().map(|s| s.modality).collect(),
            image_side,
            class_names: None,
            provenance: Provenance::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            features: self.features.row(i).to_vec(),
            class_id: self.class_ids[i],
            modality: self.modalities[i],
        }
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.class_ids.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Sample indices per class and modality, in dataset order.
    pub fn index(&self) -> BTreeMap<u32, [Vec<usize>; 2]> {
        let mut out: BTreeMap<u32, [Vec<usize>; 2]> = BTreeMap::new();
        for (i, (&c, &m)) in self.class_ids.iter().zip(&self.modalities).enumerate() {
            out.entry(c).or_default()[m as usize].push(i);
        }
        out
    }

    /// Errors unless every class has samples in both modalities.
    pub fn check_both_modalities(&self) -> Result<()> {
        for (c, [a, b]) in self.index() {
            if a.is_empty() || b.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "class {c} is missing a modality"
                )));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.features.row(i).to_vec()).collect();
        Dataset {
            features: Tensor::from_rows(&rows).expect("non-empty subset"),
            class_ids: indices.iter().map(|&i| self.class_ids[i]).collect(),
            modalities: indices.iter().map(|&i| self.modalities[i]).collect(),
            image_side: self.image_side,
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Disjoint-identity split: the `test_classes` highest class ids are held out.
    pub fn split_by_class(&self, test_classes: usize) -> Result<(Dataset, Dataset)> {
        let classes = self.classes();
        if test_classes == 0 || test_classes >= classes.len() {
            return Err(Error::Config(format!(
                "cannot hold out {test_classes} of {} classes",
                classes.len()
            )));
        }
        let cut = classes[classes.len() - test_classes];
        let (train, test): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| self.class_ids[i] < cut);
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Feature rows for `indices` as a `[n, dim]` tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(self.features.row(i).iter().map(|&v| T::of_f64(v)));
        }
        Tensor::new(vec![indices.len(), d], data).expect("non-empty batch")
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Writes the feature tensor container at `path` and the id sidecar at `path.json`.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(serde_json::json!({
            "kind": "dataset",
            "seed": self.provenance.seed,
            "config_hash": self.provenance.config_hash,
        }));
        a.push("features", AnyTensor::F64(self.features.clone()));
        a.save(path)?;
        let side = Sidecar {
            class_ids: self.class_ids.clone(),
            modalities: self.modalities.clone(),
            image_side: self.image_side,
            class_names: self.class_names.clone(),
            seed: self.provenance.seed,
            config_hash: self.provenance.config_hash.clone(),
        };
        let sp = Self::sidecar_path(path);
        let mut json = serde_json::to_vec_pretty(&side)?;
        json.push(b'\n');
        std::fs::write(&sp, json).map_err(|e| Error::io(sp, e))
    }

    pub fn import(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("dataset") {
            return Err(Error::Format(format!("{} is not a dataset file", path.display())));
        }
        let features = a
            .get("features")
            .ok_or_else(|| Error::Format("dataset without `features`".into()))?
            .to::<f64>();
        let sp = Self::sidecar_path(path);
        let text = std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_slice(&text)?;
        if side.class_ids.len() != features.shape()[0] || side.modalities.len() != side.class_ids.len() {
            return Err(Error::Format("sidecar does not match feature rows".into()));
        }
        Ok(Self {
            features,
            class_ids: side.class_ids,
            modalities: side.modalities,
            image_side: side.image_side,
            class_names: side.class_names,
            provenance: Provenance {
                seed: side.seed,
                config_hash: side.config_hash,
                run_config: serde_json::Value::Null,
            },
        })
    }
}
