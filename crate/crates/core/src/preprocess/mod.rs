//! Scene types and the data pipeline in front of the model:
//! PCA compression, patch extraction, stratified splits and synthetic scenes.

mod patches;
mod pca;
mod split;
mod synth;

pub use patches::{extract_patches, extract_patches_at, PatchSet};
pub use pca::{pca_fit, pca_transform, PcaModel};
pub use split::{split, SplitConfig};
pub use synth::{synth_scene, SynthConfig};

use crate::error::{Error, Result};

/// Hyperspectral cube, row-major `H×W×C` (band index fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::contract(format!(
                "cube extents must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::shape("cube", &[height, width, bands], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "cube",
                detail: format!("non-finite value at flat index {i}"),
            });
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        let at = (row * self.width + col) * self.bands;
        &self.data[at..at + self.bands]
    }
}

/// Per-pixel class labels in `0..=K`, where 0 marks an unlabeled pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("label map", &[height, width], &[labels.len()]));
        }
        if num_classes == 0 || num_classes > u16::MAX as usize {
            return Err(Error::config(format!("unsupported class count {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_classes) {
            return Err(Error::contract(format!(
                "label {bad} exceeds class count {num_classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
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

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Pixel counts of classes `1..=K` (index 0 is class 1).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    /// Row-major coordinates of every labeled pixel.
    pub fn labeled_coords(&self) -> Vec<(usize, usize)> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] > 0)
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

/// numpy-style `reflect` index (edge not repeated) for `i` in `-(n-1)..2n-1`.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - r;
    }
    r as usize
}
