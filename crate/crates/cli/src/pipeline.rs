//! Scene → PCA → patches → split, shared by every command.

use std::path::Path;

use anyhow::{bail, Context, Result};
use sdhsi::io::{read_scene, SceneHeader};
use sdhsi::preprocess::{extract_patches, pca_fit, pca_transform, split, HsiCube, LabelMap, PatchSet, PcaModel, SplitConfig};

pub struct Scene {
    pub cube: HsiCube,
    pub labels: LabelMap,
    pub header: SceneHeader,
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let (cube, labels, header) = read_scene(dir).with_context(|| format!("reading scene {}", dir.display()))?;
    Ok(Scene { cube, labels, header })
}

/// PCA-reduced scene, ready for patch extraction at any size.
pub struct Reduced {
    pub pca: PcaModel,
    pub cube: HsiCube,
}

/// Fits PCA with `bands` components, clamped to the scene's band count.
pub fn reduce(scene: &Scene, bands: usize) -> Result<Reduced> {
    let available = scene.cube.bands();
    let b = if bands > available {
        log::warn!("requested {bands} PCA components but the scene has {available} bands; using {available}");
        available
    } else {
        bands
    };
    let pca = pca_fit(&scene.cube, b).context("fitting PCA")?;
    let cube = pca_transform(&pca, &scene.cube).context("projecting scene")?;
    Ok(Reduced { pca, cube })
}

/// Applies a stored PCA model to a scene.
pub fn reduce_with(scene: &Scene, pca: &PcaModel) -> Result<HsiCube> {
    if pca.bands_in != scene.cube.bands() {
        bail!(
            "checkpoint PCA expects {} input bands but the scene has {}",
            pca.bands_in,
            scene.cube.bands()
        );
    }
    Ok(pca_transform(pca, &scene.cube)?)
}

pub struct Splits {
    pub train: PatchSet,
    pub val: PatchSet,
    pub test: PatchSet,
}

pub fn make_splits(cube: &HsiCube, labels: &LabelMap, patch: usize, cfg: &SplitConfig) -> Result<Splits> {
    let all = extract_patches(cube, labels, patch).with_context(|| format!("extracting {patch}x{patch} patches"))?;
    let (train, val, test) = split(&all, cfg).context("splitting samples")?;
    log::info!(
        "{} labeled samples: {} train / {} val / {} test",
        all.len(),
        train.len(),
        val.len(),
        test.len()
    );
    Ok(Splits { train, val, test })
}

/// Parses `a,b,c` as percentages (summing to 100) or fractions (summing to 1).
pub fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("split {s:?} is not three comma-separated numbers"))?;
    let [a, b, c] = parts[..] else {
        bail!("split {s:?} must have exactly three parts");
    };
    let sum = a + b + c;
    let scale = if (sum - 100.0).abs() < 1e-6 {
        100.0
    } else if (sum - 1.0).abs() < 1e-6 {
        1.0
    } else {
        bail!("split {s:?} must sum to 100 (percent) or 1 (fractions)");
    };
    Ok([a / scale, b / scale, c / scale])
}
