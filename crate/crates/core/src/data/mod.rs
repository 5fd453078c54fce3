//! Dataset ingestion and generation. Loaded pixels always land in [-1, 1];
//! train splits contain only normal samples and that contract is checked
//! at load time.

pub mod digits;
pub mod idx;
pub mod pnm;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use synthetic::{generate_synthetic, DefectKind, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous,
}

/// One image with its class and, for anomalous test samples, the pixel
/// ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    /// [h, w, c] in [-1, 1]
    pub image: Tensor<f32>,
    pub label: Label,
    pub mask: Option<BinaryMask>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self
            .image
            .data()
            .iter()
            .any(|&v| !(-1.0..=1.0).contains(&v))
        {
            return Err(Error::Data("pixel outside [-1, 1]".into()));
        }
        match (self.label, &self.mask) {
            (Label::Anomalous, Some(m)) if m.any() => Ok(()),
            (Label::Anomalous, _) => Err(Error::Data(
                "anomalous sample requires a non-empty mask".into(),
            )),
            (Label::Normal, Some(m)) if m.any() => Err(Error::Data(
                "normal sample carries a non-empty mask".into(),
            )),
            (Label::Normal, _) => Ok(()),
        }
    }

    pub fn is_anomalous(&self) -> bool {
        self.label == Label::Anomalous
    }
}

/// Train and test splits; the train side is normal-only.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for s in &self.train {
            s.validate()?;
            if s.is_anomalous() {
                return Err(Error::Data("train split contains an anomalous sample".into()));
            }
        }
        for s in &self.test {
            s.validate()?;
        }
        Ok(())
    }
}

/// Where a dataset comes from, as configured in run files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    Idx(IdxSpec),
    ImageDir(ImageDirSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// This digit is the normal class; everything else is anomalous.
    pub normal_digit: u8,
    /// Pad images to this square size (centered, background fill).
    #[serde(default)]
    pub pad_to: Option<usize>,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ImageDirSpec {
    pub root: PathBuf,
    /// Scale the short side to this size before cropping.
    #[serde(default)]
    pub resize: Option<usize>,
    /// Center-crop to this square size after resizing.
    #[serde(default)]
    pub crop: Option<usize>,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let ds = match self {
            DatasetSpec::Synthetic(cfg) => generate_synthetic(cfg, cfg.seed)?,
            DatasetSpec::Idx(spec) => load_idx_dataset(spec)?,
            DatasetSpec::ImageDir(spec) => load_image_dir(&spec.root, spec.resize, spec.crop)?,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn load_idx_dataset(spec: &IdxSpec) -> Result<Dataset> {
    let mut train = load_idx(&spec.train_images, &spec.train_labels, spec.normal_digit)?;
    // semi-supervised contract: only the normal digit is trained on
    train.retain(|s| !s.is_anomalous());
    if let Some(limit) = spec.train_limit {
        train.truncate(limit);
    }
    let mut test = load_idx(&spec.test_images, &spec.test_labels, spec.normal_digit)?;
    if let Some(limit) = spec.test_limit {
        test.truncate(limit);
    }
    if let Some(size) = spec.pad_to {
        for s in train.iter_mut().chain(test.iter_mut()) {
            s.image = pad_to_square(&s.image, size)?;
            if let Some(m) = &s.mask {
                s.mask = Some(pad_mask(m, size)?);
            }
        }
    }
    Ok(Dataset { train, test })
}

/// Centers an [h, w, c] image inside a size x size canvas filled with -1.
pub fn pad_to_square(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    if h > size || w > size {
        return Err(Error::Data(format!(
            "cannot pad {}x{} image to smaller {}x{}",
            h, w, size, size
        )));
    }
    let (oy, ox) = ((size - h) / 2, (size - w) / 2);
    let mut data = vec![-1.0f32; size * size * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[((y + oy) * size + (x + ox)) * c + ch] = image.data()[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::new(vec![size, size, c], data)
}

fn pad_mask(mask: &BinaryMask, size: usize) -> Result<BinaryMask> {
    let (oy, ox) = ((size - mask.height) / 2, (size - mask.width) / 2);
    let mut data = vec![false; size * size];
    for y in 0..mask.height {
        for x in 0..mask.width {
            data[(y + oy) * size + (x + ox)] = mask.data[y * mask.width + x];
        }
    }
    BinaryMask::new(size, size, data)
}

/// Loads a directory laid out as train/good, test/<category>,
/// ground_truth/<category>. Images are binary PGM or PPM; anomalous test
/// images must have a mask named <stem>_mask.pgm or <stem>.pgm. File order
/// is lexicographic.
pub fn load_image_dir(
    root: &Path,
    resize: Option<usize>,
    crop: Option<usize>,
) -> Result<Dataset> {
    let train_root = root.join("train");
    for entry in sorted_dir(&train_root)? {
        if entry.file_name().and_then(|n| n.to_str()) != Some("good") {
            return Err(Error::Data(format!(
                "train split may only contain 'good', found {}",
                entry.display()
            )));
        }
    }
    let mut train = Vec::new();
    for path in sorted_dir(&train_root.join("good"))? {
        train.push(Sample {
            image: load_pixels(&path, resize, crop)?,
            label: Label::Normal,
            mask: None,
        });
    }

    let mut test = Vec::new();
    for category_dir in sorted_dir(&root.join("test"))? {
        let category = category_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let normal = category == "good";
        for path in sorted_dir(&category_dir)? {
            let image = load_pixels(&path, resize, crop)?;
            let mask = if normal {
                None
            } else {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default();
                let gt_dir = root.join("ground_truth").join(&category);
                let candidates = [
                    gt_dir.join(format!("{stem}_mask.pgm")),
                    gt_dir.join(format!("{stem}.pgm")),
                ];
                let mask_path = candidates
                    .iter()
                    .find(|p| p.exists())
                    .ok_or_else(|| {
                        Error::Data(format!("missing mask for anomalous image {}", path.display()))
                    })?;
                Some(load_mask(mask_path, resize, crop)?)
            };
            test.push(Sample {
                image,
                label: if normal { Label::Normal } else { Label::Anomalous },
                mask,
            });
        }
    }
    Ok(Dataset { train, test })
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn load_pixels(path: &Path, resize: Option<usize>, crop: Option<usize>) -> Result<Tensor<f32>> {
    let mut img = pnm::read_pnm(path)?;
    if let Some(short) = resize {
        img = pnm::resize_short_side(&img, short);
    }
    if let Some(size) = crop {
        img = pnm::center_crop(&img, size)?;
    }
    Ok(img)
}

fn load_mask(path: &Path, resize: Option<usize>, crop: Option<usize>) -> Result<BinaryMask> {
    let gray = load_pixels(path, resize, crop)?;
    let s = gray.shape();
    if s[2] != 1 {
        return Err(Error::Data(format!(
            "mask {} must be single-channel",
            path.display()
        )));
    }
    // pixels sit in [-1, 1]; the 0.5 gray-level threshold maps to 0.0 here
    let data = gray.data().iter().map(|&v| v > 0.0).collect();
    BinaryMask::new(s[0], s[1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_centers_and_fills_background() {
        let img = Tensor::new(vec![2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let padded = pad_to_square(&img, 4).unwrap();
        assert_eq!(padded.shape(), &[4, 4, 1]);
        assert_eq!(padded.data()[(1 * 4 + 1) * 1], 0.1);
        assert_eq!(padded.data()[0], -1.0);
    }

    #[test]
    fn sample_contract_enforced() {
        let normal = Sample {
            image: Tensor::zeros(vec![2, 2, 1]),
            label: Label::Normal,
            mask: None,
        };
        assert!(normal.validate().is_ok());
        let bad = Sample {
            image: Tensor::zeros(vec![2, 2, 1]),
            label: Label::Anomalous,
            mask: None,
        };
        assert!(bad.validate().is_err());
        let out_of_range = Sample {
            image: Tensor::filled(vec![2, 2, 1], 1.5),
            label: Label::Normal,
            mask: None,
        };
        assert!(out_of_range.validate().is_err());
    }

    #[test]
    fn train_split_rejects_anomalies() {
        let mask = BinaryMask::new(2, 2, vec![true, false, false, false]).unwrap();
        let ds = Dataset {
            train: vec![Sample {
                image: Tensor::zeros(vec![2, 2, 1]),
                label: Label::Anomalous,
                mask: Some(mask),
            }],
            test: vec![],
        };
        assert!(ds.validate().is_err());
    }
}
