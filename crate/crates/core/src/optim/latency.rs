use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Head, SdhsiModel};
use crate::tensor::Element;

/// Per-sample inference time, in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_us: f64,
    pub mean_us: f64,
    pub repetitions: usize,
    pub batch: usize,
}

/// Times eval-mode forward passes of `head` on `batch` (a flat `N×1×B×S×S` buffer).
///
/// `warmup` passes run first and are discarded.
pub fn measure_inference<T: Element>(
    model: &SdhsiModel<T>,
    head: Head,
    batch: &[T],
    repetitions: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    if repetitions == 0 {
        return Err(Error::config("latency measurement needs at least one repetition"));
    }
    let c = model.config();
    let n = batch.len() / (c.bands * c.patch * c.patch).max(1);
    for _ in 0..warmup {
        std::hint::black_box(model.logits(batch, head)?);
    }
    let mut per_sample = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        std::hint::black_box(model.logits(batch, head)?);
        per_sample.push(t0.elapsed().as_secs_f64() * 1e6 / n as f64);
    }
    Ok(LatencyStats {
        median_us: median(&mut per_sample),
        mean_us: per_sample.iter().sum::<f64>() / repetitions as f64,
        repetitions,
        batch: n,
    })
}

pub(crate) fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}
