//! Labeled image datasets: IDX loading, synthetic generators and the
//! initial OOD images the attack starts from.

pub mod idx;
pub mod ood_init;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use idx::{load_idx, read_idx};
pub use ood_init::{make_initial_ood, DistanceGuard, OodInitKind};
pub use synthetic::{make_synthetic, SyntheticKind, SyntheticSpec};

/// Images with integer class labels. Every image has shape `C×H×W` with
/// pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    image_shape: Vec<usize>,
    images: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        image_shape: Vec<usize>,
        images: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = images.iter().position(|x| x.shape() != image_shape.as_slice()) {
            return Err(Error::Shape(format!(
                "image {bad} has shape {:?}, expected {image_shape:?}",
                images[bad].shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            image_shape,
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// First `n` samples (or all, when fewer exist).
    pub fn take(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            image_shape: self.image_shape.clone(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Deterministic shuffled split into `(first, rest)` with `first_len` samples.
    pub fn split(&self, first_len: usize, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = first_len.min(idx.len());
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// Every image reshaped to a flat vector, e.g. for linear probes.
    pub fn flattened(&self) -> Result<Dataset> {
        let n: usize = self.image_shape.iter().product();
        let images = self
            .images
            .iter()
            .map(|x| x.clone().reshape(vec![n]))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(vec![n], images, self.labels.clone(), self.num_classes)
    }
}
