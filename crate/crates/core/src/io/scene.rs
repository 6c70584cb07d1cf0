use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{create_dir, read_bytes, read_json, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::preprocess::{HsiCube, LabelMap};

pub const HEADER_FILE: &str = "header.json";
pub const CUBE_FILE: &str = "cube.raw";
pub const LABELS_FILE: &str = "labels.raw";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub num_classes: usize,
    pub cube_dtype: String,
    pub label_dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl SceneHeader {
    pub fn new(height: usize, width: usize, bands: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            bands,
            num_classes,
            cube_dtype: "f32le".into(),
            label_dtype: "u16le".into(),
            class_names: None,
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.cube_dtype != "f32le" {
            return Err(Error::format(path, format!("cube_dtype must be \"f32le\", got {:?}", self.cube_dtype)));
        }
        if self.label_dtype != "u16le" {
            return Err(Error::format(path, format!("label_dtype must be \"u16le\", got {:?}", self.label_dtype)));
        }
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::format(path, "height, width and bands must be positive"));
        }
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize {
            return Err(Error::format(path, format!("num_classes {} out of range", self.num_classes)));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::format(
                    path,
                    format!("class_names has {} entries for {} classes", names.len(), self.num_classes),
                ));
            }
        }
        Ok(())
    }
}

fn expect_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(())
}

/// Reads `header.json`, `cube.raw` and `labels.raw` from `dir`.
pub fn read_scene(dir: &Path) -> Result<(HsiCube, LabelMap, SceneHeader)> {
    let header_path = dir.join(HEADER_FILE);
    let header: SceneHeader = read_json(&header_path)?;
    header.validate(&header_path)?;
    let (h, w, c) = (header.height, header.width, header.bands);

    let cube_path = dir.join(CUBE_FILE);
    let raw = read_bytes(&cube_path)?;
    expect_len(&cube_path, &raw, h * w * c * 4)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(&cube_path, format!("non-finite value at element {i}")));
    }
    let cube = HsiCube::new(h, w, c, data)?;

    let labels_path = dir.join(LABELS_FILE);
    let raw = read_bytes(&labels_path)?;
    expect_len(&labels_path, &raw, h * w * 2)?;
    let labels: Vec<u16> = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    if let Some(i) = labels.iter().position(|&l| l as usize > header.num_classes) {
        return Err(Error::format(
            &labels_path,
            format!("label {} at pixel {i} exceeds num_classes {}", labels[i], header.num_classes),
        ));
    }
    let labels = LabelMap::new(h, w, header.num_classes, labels)?;
    Ok((cube, labels, header))
}

/// Writes a scene container; cube values are stored as f32.
pub fn write_scene(cube: &HsiCube, labels: &LabelMap, class_names: Option<Vec<String>>, dir: &Path) -> Result<()> {
    if cube.height() != labels.height() || cube.width() != labels.width() {
        return Err(Error::shape(
            "write_scene",
            &[cube.height(), cube.width()],
            &[labels.height(), labels.width()],
        ));
    }
    let mut header = SceneHeader::new(cube.height(), cube.width(), cube.bands(), labels.num_classes());
    header.class_names = class_names;
    header.validate(&dir.join(HEADER_FILE))?;
    create_dir(dir)?;

    let cube_bytes: Vec<u8> = cube.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let label_bytes: Vec<u8> = labels.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    write_json(&dir.join(HEADER_FILE), &header)?;
    write_bytes(&dir.join(CUBE_FILE), &cube_bytes)?;
    write_bytes(&dir.join(LABELS_FILE), &label_bytes)
}
