use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::{Dataset, Modality, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDirConfig {
    pub root: PathBuf,
    #[serde(default = "default_side")]
    pub side: usize,
}

fn default_side() -> usize {
    32
}

pub fn center_crop_square(img: &GrayImage) -> GrayImage {
    let (w, h) = img.dimensions();
    let s = w.min(h);
    image::imageops::crop_imm(img, (w - s) / 2, (h - s) / 2, s, s).to_image()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<modality>/<file>` as grayscale pixels in `[0, 1]`,
/// center-cropped to a square and resized to `side x side`. Classes are
/// numbered in sorted directory-name order. Normalization is left to
/// [`super::FeatureStats`] so it can be fitted on the training split.
pub fn load_image_dir(cfg: &ImageDirConfig) -> Result<Dataset> {
    if cfg.side == 0 {
        return Err(Error::Config("image side must be positive".into()));
    }
    let mut samples = Vec::new();
    let mut names = Vec::new();
    for class_dir in sorted_entries(&cfg.root)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir.file_name().unwrap().to_string_lossy().into_owned();
        let id = names.len() as u32;
        let mut seen = [false; 2];
        for mod_dir in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_dir()) {
            let Some(m) = Modality::from_name(&mod_dir.file_name().unwrap().to_string_lossy()) else {
                log::warn!("ignoring unknown modality directory {}", mod_dir.display());
                continue;
            };
            for file in sorted_entries(&mod_dir)?.into_iter().filter(|p| p.is_file()) {
                let img = match image::open(&file) {
                    Ok(img) => img.to_luma8(),
                    Err(e) => {
                        log::warn!("skipping {}: {e}", file.display());
                        continue;
                    }
                };
                let sq = center_crop_square(&img);
                let side = cfg.side as u32;
                let small = image::imageops::resize(&sq, side, side, FilterType::Triangle);
                samples.push(Sample {
                    features: small.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
                    class_id: id,
                    modality: m,
                });
                seen[m as usize] = true;
            }
        }
        if !seen[0] && !seen[1] {
            continue;
        }
        if !(seen[0] && seen[1]) {
            return Err(Error::InvalidArgument(format!("class `{name}` has only one modality")));
        }
        names.push(name);
    }
    if names.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} holds fewer than two usable classes",
            cfg.root.display()
        )));
    }
    let mut ds = Dataset::from_samples(samples, Some(cfg.side))?;
    ds.class_names = Some(names);
    Ok(ds)
}
