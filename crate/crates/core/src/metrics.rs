//! Confusion matrix and the OA / AA / Cohen's κ summary scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Matrix from row-major counts (rows = truth).
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape("confusion matrix", &[classes, classes], &[counts.len()]));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.classes..(k + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, k)).sum()
    }

    /// Overall accuracy, `trace / total`.
    pub fn oa(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyDataset("overall accuracy of an empty confusion matrix".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Mean per-class recall over classes that occur in the ground truth.
    pub fn aa(&self) -> Result<f64> {
        let recalls: Vec<f64> = (0..self.classes)
            .filter_map(|k| {
                let n = self.row_sum(k);
                (n > 0).then(|| self.get(k, k) as f64 / n as f64)
            })
            .collect();
        if recalls.is_empty() {
            return Err(Error::EmptyDataset("average accuracy of an empty confusion matrix".into()));
        }
        Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    /// Cohen's κ = (p_o − p_e)/(1 − p_e); defined as 0 when p_e = 1.
    pub fn kappa(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyDataset("kappa of an empty confusion matrix".into()));
        }
        // Same formula with numerator and denominator scaled by total², kept in
        // integers so that only the final division rounds.
        let n = total as u128;
        let chance: u128 = (0..self.classes)
            .map(|k| self.row_sum(k) as u128 * self.col_sum(k) as u128)
            .sum();
        if chance == n * n {
            return Ok(0.0);
        }
        let num = (n * self.trace() as u128) as i128 - chance as i128;
        Ok(num as f64 / (n * n - chance) as f64)
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::contract(format!(
                "class index {} out of range for {classes} classes",
                p.max(t)
            )));
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

/// OA, AA and κ of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl Scores {
    pub fn of(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            oa: cm.oa()?,
            aa: cm.aa()?,
            kappa: cm.kappa()?,
        })
    }
}
