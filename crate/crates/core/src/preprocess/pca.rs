use serde::{Deserialize, Serialize};

use super::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef};

/// Spectral PCA basis. `components` is row-major `C×B`, one component per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub bands_in: usize,
    pub bands_out: usize,
}

impl PcaModel {
    pub fn component(&self, j: usize) -> Vec<f64> {
        (0..self.bands_in)
            .map(|i| self.components[i * self.bands_out + j])
            .collect()
    }

    /// Projects one spectrum onto the basis.
    pub fn project(&self, spectrum: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, (&x, &m)) in spectrum.iter().zip(&self.mean).enumerate() {
            let c = x - m;
            let row = &self.components[i * self.bands_out..(i + 1) * self.bands_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += c * w;
            }
        }
    }

    /// Maps projected coordinates back to a (mean-restored) spectrum.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        (0..self.bands_in)
            .map(|i| {
                let row = &self.components[i * self.bands_out..(i + 1) * self.bands_out];
                self.mean[i] + row.iter().zip(coords).map(|(w, c)| w * c).sum::<f64>()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, b) = (self.bands_in, self.bands_out);
        if self.mean.len() != c || self.components.len() != c * b || self.explained_variance.len() != b || b > c {
            return Err(Error::shape("pca model", &[c, b], &[self.mean.len(), self.components.len()]));
        }
        Ok(())
    }
}

/// Fits a `bands`-component PCA over every pixel of `cube`.
pub fn pca_fit(cube: &HsiCube, bands: usize) -> Result<PcaModel> {
    let (n, c) = (cube.pixels(), cube.bands());
    if bands == 0 || bands > c {
        return Err(Error::config(format!(
            "cannot keep {bands} principal components of a {c}-band cube"
        )));
    }
    if n < bands + 1 {
        return Err(Error::config(format!(
            "pca with {bands} components needs at least {} pixels, got {n}",
            bands + 1
        )));
    }
    let mut mean = vec![0.0; c];
    for px in cube.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = cube
        .data()
        .chunks(c)
        .flat_map(|px| px.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let mut cov = vec![0.0; c * c];
    gemm(
        1.0 / (n - 1) as f64,
        MatRef::rm_t(&centered, c, n),
        MatRef::rm(&centered, n, c),
        0.0,
        &mut cov,
    );
    let (values, vectors) = symmetric_eigen(cov, c);

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let rank = values.iter().filter(|&&v| v > scale * 1e-12).count();
    if bands > rank {
        log::warn!("pca: keeping {bands} components of a rank-{rank} covariance; trailing components carry no variance");
    }

    let mut components = vec![0.0; c * bands];
    let mut explained_variance = Vec::with_capacity(bands);
    for (j, &src) in order.iter().take(bands).enumerate() {
        let col: Vec<f64> = (0..c).map(|i| vectors[i * c + src]).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..c {
            components[i * bands + j] = sign * col[i];
        }
        explained_variance.push(values[src].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        bands_in: c,
        bands_out: bands,
    })
}

/// Projects every pixel onto the model's components.
pub fn pca_transform(model: &PcaModel, cube: &HsiCube) -> Result<HsiCube> {
    model.validate()?;
    if cube.bands() != model.bands_in {
        return Err(Error::shape("pca_transform bands", &[cube.bands()], &[model.bands_in]));
    }
    let b = model.bands_out;
    let mut out = vec![0.0; cube.pixels() * b];
    for (px, dst) in cube.data().chunks(cube.bands()).zip(out.chunks_mut(b)) {
        model.project(px, dst);
    }
    HsiCube::new(cube.height(), cube.width(), b, out)
}

/// Cyclic Jacobi eigendecomposition of a symmetric row-major `n×n` matrix.
/// Returns eigenvalues and a row-major matrix whose columns are eigenvectors.
fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= total * 1e-30 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}
