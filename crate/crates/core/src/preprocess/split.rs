use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PatchSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let cfg = Self { train, val, test, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::config(format!("split fractions must be non-negative, got {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("split fractions must sum to 1, got {fr:?}")));
        }
        Ok(())
    }
}

/// Floor allocation with a small tolerance so that e.g. `0.1·10` counts as 1.
fn share(frac: f64, n: usize) -> usize {
    ((frac * n as f64) + 1e-9).floor() as usize
}

/// Stratified per-class split into (train, val, test).
///
/// Within each class the samples are shuffled, `⌊frac·n⌋` go to train and val,
/// and the remainder to test. Every class keeps at least one training sample.
/// Each output keeps the input's sample order.
pub fn split(set: &PatchSet, cfg: &SplitConfig) -> Result<(PatchSet, PatchSet, PatchSet)> {
    cfg.validate()?;
    let classes = set.labels().iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in set.labels().iter().enumerate() {
        members[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (class, idx) in members.iter_mut().enumerate() {
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            return Err(Error::EmptyDataset(format!(
                "class {} has {n} samples; splitting needs at least 3",
                class + 1
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = share(cfg.train, n).max(1);
        let n_val = share(cfg.val, n).min(n - n_train);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok((set.select(&train), set.select(&val), set.select(&test)))
}
