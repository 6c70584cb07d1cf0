use super::{reflect, HsiCube, LabelMap};
use crate::error::{Error, Result};

/// Patches stored in model input layout: each sample is `B×S×S` (band-major).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    size: usize,
    bands: usize,
    data: Vec<f32>,
    labels: Vec<usize>,
    coords: Vec<(usize, usize)>,
}

impl PatchSet {
    pub fn empty(size: usize, bands: usize) -> Self {
        Self {
            size,
            bands,
            data: Vec::new(),
            labels: Vec::new(),
            coords: Vec::new(),
        }
    }

    /// Spatial side `S`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.bands * self.size * self.size
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Value at spatial offset (`row`, `col`) within patch `i`, band `band`.
    pub fn at(&self, i: usize, row: usize, col: usize, band: usize) -> f32 {
        self.patch(i)[(band * self.size + row) * self.size + col]
    }

    /// Zero-based class indices.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    /// New set holding samples `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PatchSet {
        let mut out = PatchSet::empty(self.size, self.bands);
        for &i in indices {
            out.data.extend_from_slice(self.patch(i));
            out.labels.push(self.labels[i]);
            out.coords.push(self.coords[i]);
        }
        out
    }

    /// Concatenated samples `indices` as a flat `N×1×B×S×S` buffer.
    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            out.extend_from_slice(self.patch(i));
        }
        out
    }
}

/// One patch per labeled pixel (row-major order), labels shifted to `0..K`.
pub fn extract_patches(cube: &HsiCube, labels: &LabelMap, size: usize) -> Result<PatchSet> {
    if labels.height() != cube.height() || labels.width() != cube.width() {
        return Err(Error::shape(
            "extract_patches",
            &[cube.height(), cube.width()],
            &[labels.height(), labels.width()],
        ));
    }
    let coords = labels.labeled_coords();
    if coords.is_empty() {
        return Err(Error::EmptyDataset("label map has no labeled pixels".into()));
    }
    let classes: Vec<usize> = coords.iter().map(|&(r, c)| labels.get(r, c) as usize - 1).collect();
    extract_patches_at(cube, &coords, &classes, size)
}

/// Patches centered at `coords`, with borders reflect-padded by `(S−1)/2`.
pub fn extract_patches_at(cube: &HsiCube, coords: &[(usize, usize)], labels: &[usize], size: usize) -> Result<PatchSet> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(Error::config(format!("patch size must be odd, got {size}")));
    }
    let (h, w, b) = (cube.height(), cube.width(), cube.bands());
    let half = size / 2;
    // Single reflection needs the pad to be smaller than each extent.
    if half >= h || half >= w {
        return Err(Error::config(format!(
            "patch size {size} too large for a {h}x{w} scene"
        )));
    }
    if coords.len() != labels.len() {
        return Err(Error::contract("coordinate and label counts differ"));
    }
    if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= h || c >= w) {
        return Err(Error::contract(format!("patch center ({r}, {c}) outside {h}x{w} scene")));
    }
    let mut out = PatchSet::empty(size, b);
    out.data.reserve(coords.len() * b * size * size);
    let mut buf = vec![0.0f32; b * size * size];
    for (&(r, c), &label) in coords.iter().zip(labels) {
        for dy in 0..size {
            let y = reflect(r as isize + dy as isize - half as isize, h);
            for dx in 0..size {
                let x = reflect(c as isize + dx as isize - half as isize, w);
                for (band, &v) in cube.spectrum(y, x).iter().enumerate() {
                    buf[(band * size + dy) * size + dx] = v as f32;
                }
            }
        }
        out.data.extend_from_slice(&buf);
        out.labels.push(label);
        out.coords.push((r, c));
    }
    Ok(out)
}
