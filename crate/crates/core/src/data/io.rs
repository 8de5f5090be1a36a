//! Readers for the two common binary image formats.
//!
//! The idx reader takes the classic big-endian magic-plus-dims layout used
//! for handwritten digit sets. The cifar reader takes fixed-length records
//! of one or two label bytes followed by a 3072-byte planar RGB image.

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Dataset("truncated idx header".into()))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Loads a grayscale idx image file plus its companion label file. Pixels
/// are scaled to `[0, 1]`; the class count is `max label + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    if read_u32_be(&image_bytes, 0)? != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!(
            "{} is not an idx image file",
            images_path.display()
        )));
    }
    let n = read_u32_be(&image_bytes, 4)? as usize;
    let h = read_u32_be(&image_bytes, 8)? as usize;
    let w = read_u32_be(&image_bytes, 12)? as usize;
    let expected = 16 + n * h * w;
    if image_bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "idx image file holds {} bytes, header implies {expected}",
            image_bytes.len()
        )));
    }

    if read_u32_be(&label_bytes, 0)? != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!(
            "{} is not an idx label file",
            labels_path.display()
        )));
    }
    let label_n = read_u32_be(&label_bytes, 4)? as usize;
    if label_n != n {
        return Err(Error::Dataset(format!(
            "{label_n} labels for {n} images"
        )));
    }
    if label_bytes.len() != 8 + n {
        return Err(Error::Dataset("idx label file length mismatch".into()));
    }

    let pixels: Vec<f32> = image_bytes[16..]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledImageSet::new(Tensor::new(vec![n, 1, h, w], pixels)?, labels, num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Ten,
    Hundred,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Ten => 1,
            CifarVariant::Hundred => 2,
        }
    }

    fn num_classes(self) -> usize {
        match self {
            CifarVariant::Ten => 10,
            CifarVariant::Hundred => 100,
        }
    }
}

/// Loads one or more cifar binary batch files, concatenated in the given
/// order. The hundred-class variant stores a coarse label byte first and
/// uses the fine label.
pub fn load_cifar(paths: &[impl AsRef<Path>], variant: CifarVariant) -> Result<LabeledImageSet> {
    if paths.is_empty() {
        return Err(Error::Dataset("no cifar files given".into()));
    }
    const PIXELS: usize = 3 * 32 * 32;
    let record = variant.label_bytes() + PIXELS;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path.as_ref())?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::Dataset(format!(
                "{} length {} is not a whole number of {record}-byte records",
                path.as_ref().display(),
                bytes.len()
            )));
        }
        for chunk in bytes.chunks_exact(record) {
            let label = chunk[variant.label_bytes() - 1] as usize;
            if label >= variant.num_classes() {
                return Err(Error::Dataset(format!(
                    "label {label} out of range in {}",
                    path.as_ref().display()
                )));
            }
            labels.push(label);
            data.extend(
                chunk[variant.label_bytes()..]
                    .iter()
                    .map(|&b| b as f32 / 255.0),
            );
        }
    }
    let n = labels.len();
    LabeledImageSet::new(
        Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        variant.num_classes(),
    )
}
