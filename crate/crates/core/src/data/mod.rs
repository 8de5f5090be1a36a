//! Image datasets: container, on-disk loaders, and the synthetic corpus.

mod io;
mod synthetic;

pub use io::{load_cifar, load_idx, CifarVariant};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, permutation, seed_rng, shuffle};
use crate::tensor::Tensor;

/// A labeled image collection in `[N, C, H, W]` layout with pixel values in
/// `[0, 1]`.
#[derive(Clone, Debug)]
pub struct LabeledImageSet {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Dataset(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Dataset("need at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dataset("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dims4().expect("validated 4-d");
        (c, h, w)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        &self.images.data()[i * stride..(i + 1) * stride]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Indices of every example with the given label, ascending.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Copies the rows named by `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Dataset("cannot select zero examples".into()));
        }
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            images: Tensor::new(vec![indices.len(), c, h, w], data)?,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Gathers one batch of images into a fresh tensor.
    pub fn gather_images(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    /// Keeps `per_class` examples of every class, chosen by seeded shuffle,
    /// returned in ascending original order. Errors if any class is short.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::Dataset("per_class must be at least 1".into()));
        }
        let mut keep = Vec::with_capacity(per_class * self.num_classes);
        for class in 0..self.num_classes {
            let mut indices = self.class_indices(class);
            if indices.len() < per_class {
                return Err(Error::Dataset(format!(
                    "class {class} has {} examples, need {per_class}",
                    indices.len()
                )));
            }
            let mut rng = seed_rng(derive_seed(seed, &format!("subsample{class}")));
            shuffle(&mut rng, &mut indices);
            keep.extend_from_slice(&indices[..per_class]);
        }
        keep.sort_unstable();
        self.select(&keep)
    }

    /// Shuffled minibatches for one epoch. The order depends only on
    /// `(seed, epoch)`; the final batch may be short.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Result<BatchIter<'_>> {
        if batch_size == 0 {
            return Err(Error::Dataset("batch size must be at least 1".into()));
        }
        let mut rng = seed_rng(derive_seed(seed, &format!("epoch{epoch}")));
        let order = permutation(&mut rng, self.len());
        Ok(BatchIter {
            set: self,
            order,
            batch_size,
            pos: 0,
        })
    }
}

pub struct BatchIter<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = &self.order[self.pos..end];
        self.pos = end;
        let images = self
            .set
            .gather_images(indices)
            .expect("permutation indices are in range");
        let labels = indices.iter().map(|&i| self.set.labels[i]).collect();
        Some((images, labels))
    }
}
