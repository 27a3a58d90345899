//! Image classification datasets: IDX ingestion and a procedural generator.

mod idx;
pub mod synth;

pub use idx::{ingest_idx, write_idx, IMAGE_MAGIC, LABEL_MAGIC};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Single-channel images with pixels in `[0, 1]`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    num_classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, num_classes: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if pixels.len() != labels.len() * height * width {
            return Err(shape_err(
                "Dataset",
                format!(
                    "{} pixels for {} images of {height}x{width}",
                    pixels.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as a `[1, 1, H, W]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.pixels(i).to_vec()).expect("consistent shape")
    }

    /// Stacks the given images into an `[n, 1, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data).expect("consistent shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            pixels.extend_from_slice(self.pixels(i));
        }
        Self {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }

    /// Indices of the images carrying `label`, in dataset order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}
