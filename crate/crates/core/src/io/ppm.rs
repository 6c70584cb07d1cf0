use std::path::Path;

use super::write_bytes;
use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

/// Black for unlabeled pixels followed by 16 distinct class colours.
pub fn default_palette() -> Vec<Rgb> {
    vec![
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ]
}

/// Writes a binary P6 image from `width·height` RGB triples.
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[Rgb]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_ppm", &[pixels.len()], &[height, width]));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.reserve(pixels.len() * 3);
    for p in pixels {
        bytes.extend_from_slice(p);
    }
    write_bytes(path, &bytes)
}

/// Colours a row-major `height×width` map (0 = unlabeled, k = class k) and writes it as P6.
pub fn render_map(map: &[u16], width: usize, height: usize, palette: &[Rgb], path: &Path) -> Result<()> {
    let pixels = colorize(map, palette)?;
    write_ppm(path, width, height, &pixels)
}

fn colorize(map: &[u16], palette: &[Rgb]) -> Result<Vec<Rgb>> {
    map.iter()
        .map(|&v| {
            palette.get(v as usize).copied().ok_or_else(|| {
                Error::contract(format!("map value {v} has no colour in a {}-entry palette", palette.len()))
            })
        })
        .collect()
}

/// Places equally sized maps left to right, separated by `gap` white columns.
///
/// Returns the combined map's pixels and width.
pub fn side_by_side(maps: &[&[u16]], width: usize, height: usize, gap: usize, palette: &[Rgb]) -> Result<(Vec<Rgb>, usize)> {
    let total_w = maps.len() * width + maps.len().saturating_sub(1) * gap;
    let mut out = vec![[255, 255, 255]; total_w * height];
    for (m, map) in maps.iter().enumerate() {
        if map.len() != width * height {
            return Err(Error::shape("side_by_side", &[map.len()], &[height, width]));
        }
        let colours = colorize(map, palette)?;
        let x0 = m * (width + gap);
        for r in 0..height {
            out[r * total_w + x0..r * total_w + x0 + width].copy_from_slice(&colours[r * width..(r + 1) * width]);
        }
    }
    Ok((out, total_w))
}
