use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HsiCube, LabelMap};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            bands: 16,
            classes: 4,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Minimum pairwise distance between class signatures, in units of the noise sigma.
pub const SIGNATURE_SEPARATION: f64 = 10.0;
const MAX_SIGNATURE_DRAWS: usize = 10_000;

/// Region index (1-based class) of every pixel: a grid of contiguous blocks.
fn regions(h: usize, w: usize, k: usize) -> Vec<u16> {
    let rows = ((k as f64).sqrt().floor() as usize).max(1);
    let widest = k.div_ceil(rows);
    let mut out = vec![0u16; h * w];
    if rows <= h && widest <= w {
        let mut class = 0;
        for band in 0..rows {
            let per = k / rows + usize::from(band < k % rows);
            let (y0, y1) = (band * h / rows, (band + 1) * h / rows);
            for j in 0..per {
                let (x0, x1) = (j * w / per, (j + 1) * w / per);
                for y in y0..y1 {
                    out[y * w + x0..y * w + x1].fill((class + j + 1) as u16);
                }
            }
            class += per;
        }
    } else {
        // Scene too thin for a grid: consecutive row-major runs.
        for (p, v) in out.iter_mut().enumerate() {
            *v = (p * k / (h * w) + 1) as u16;
        }
    }
    out
}

fn signature(bands: usize, rng: &mut impl Rng) -> Vec<f64> {
    let b = bands as f64;
    let bumps: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let center = rng.random_range(0.0..b);
            let width = rng.random_range(b / 8.0..=b / 4.0).max(0.5);
            let amp = rng.random_range(0.5..1.0);
            (center, width, amp)
        })
        .collect();
    (0..bands)
        .map(|i| {
            bumps
                .iter()
                .map(|&(c, w, a)| a * (-(i as f64 - c).powi(2) / (2.0 * w * w)).exp())
                .sum()
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Class signatures (two Gaussian bumps over band index) with pairwise
/// distance at least `SIGNATURE_SEPARATION · sigma`.
pub fn signatures(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let min_dist = (SIGNATURE_SEPARATION * cfg.noise_sigma).max(1e-3);
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    let mut draws = 0;
    while sigs.len() < cfg.classes {
        draws += 1;
        if draws > MAX_SIGNATURE_DRAWS {
            return Err(Error::config(format!(
                "could not separate {} signatures over {} bands by {min_dist}",
                cfg.classes, cfg.bands
            )));
        }
        let s = signature(cfg.bands, rng);
        if sigs.iter().all(|o| distance(o, &s) >= min_dist) {
            sigs.push(s);
        }
    }
    Ok(sigs)
}

/// Synthetic scene: `K` contiguous class regions, each pixel its class
/// signature plus i.i.d. Gaussian noise. Values are rounded to `f32` so the
/// scene survives the on-disk container unchanged.
pub fn synth_scene(cfg: &SynthConfig) -> Result<(HsiCube, LabelMap)> {
    let (h, w, c, k) = (cfg.height, cfg.width, cfg.bands, cfg.classes);
    if h == 0 || w == 0 || c == 0 || k == 0 {
        return Err(Error::config(format!("synthetic scene extents must be positive: {cfg:?}")));
    }
    if k > h * w {
        return Err(Error::config(format!("{k} classes do not fit a {h}x{w} scene")));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::config(format!("noise sigma must be non-negative, got {}", cfg.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigs = signatures(cfg, &mut rng)?;
    let labels = regions(h, w, k);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut data = Vec::with_capacity(h * w * c);
    for &l in &labels {
        for &s in &sigs[l as usize - 1] {
            data.push((s + noise.sample(&mut rng)) as f32 as f64);
        }
    }
    Ok((HsiCube::new(h, w, c, data)?, LabelMap::new(h, w, k, labels)?))
}
