//! Training objectives: cross-entropy, logit and hint distillation,
//! batch-hard triplet loss, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::NORM_EPS;
use crate::model::{ForwardBundle, HeadOutput};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Teacher cross-entropy.
    pub ce: f64,
    /// Cross-entropy of each student head.
    pub student_ce: f64,
    pub logit: f64,
    pub hint: f64,
    pub triplet: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            student_ce: 1.0,
            logit: 1e-5,
            hint: 1e-3,
            triplet: 1e-3,
            margin: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.ce, self.student_ce, self.logit, self.hint, self.triplet];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("loss weights must be non-negative, got {w:?}")));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config(format!("triplet margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }

    /// Weights with every distillation and metric term switched off.
    pub fn ce_only(self) -> Self {
        Self {
            logit: 0.0,
            hint: 0.0,
            triplet: 0.0,
            ..self
        }
    }
}

/// Ablation switches for the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Drop student CE, logit and hint terms; the students get no training signal.
    pub no_sd: bool,
    /// Drop the triplet term.
    pub no_triplet: bool,
}

/// Per-term values for one batch (or an epoch average).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_teacher: f64,
    pub ce_s1: f64,
    pub ce_s2: f64,
    pub logit_s1: f64,
    pub logit_s2: f64,
    pub hint_s1: f64,
    pub hint_s2: f64,
    pub triplet: f64,
    pub total: f64,
}

impl LossReport {
    /// Accumulates `other · weight` into `self` (for averaging over batches).
    pub fn add_scaled(&mut self, other: &LossReport, weight: f64) {
        self.ce_teacher += other.ce_teacher * weight;
        self.ce_s1 += other.ce_s1 * weight;
        self.ce_s2 += other.ce_s2 * weight;
        self.logit_s1 += other.logit_s1 * weight;
        self.logit_s2 += other.logit_s2 * weight;
        self.hint_s1 += other.hint_s1 * weight;
        self.hint_s2 += other.hint_s2 * weight;
        self.triplet += other.triplet * weight;
        self.total += other.total * weight;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.ce_teacher,
            self.ce_s1,
            self.ce_s2,
            self.logit_s1,
            self.logit_s2,
            self.hint_s1,
            self.hint_s2,
            self.triplet,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn cross_entropy<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

fn mean_row_sq_norm<T: Element>(g: &mut Graph<T>, diff: Var) -> Var {
    let n = g.shape(diff)[0];
    let sq = g.mul(diff, diff).expect("same shape");
    let total = g.sum(sq);
    g.mul_scalar(total, T::of(1.0 / n as f64))
}

fn check_pair<T: Element>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb || sa.len() != 2 || sa[0] == 0 {
        return Err(Error::shape(op, sa, sb));
    }
    Ok(())
}

/// `(1/N)·Σᵢ ‖z_Tᵢ − z_Sᵢ‖²`; the teacher logits are treated as constants.
pub fn logit_distillation<T: Element>(g: &mut Graph<T>, z_t: Var, z_s: Var) -> Result<Var> {
    check_pair(g, "logit_distillation", z_t, z_s)?;
    let target = g.detach(z_t);
    let diff = g.sub(z_s, target)?;
    Ok(mean_row_sq_norm(g, diff))
}

/// `(1/N)·Σᵢ ‖f_Tᵢ/‖f_Tᵢ‖ − f_Sᵢ/‖f_Sᵢ‖‖²`; the teacher features are treated as constants.
pub fn hint_loss<T: Element>(g: &mut Graph<T>, f_t: Var, f_s: Var) -> Result<Var> {
    check_pair(g, "hint_loss", f_t, f_s)?;
    let target = g.detach(f_t);
    let target = g.normalize_rows(target, NORM_EPS)?;
    let student = g.normalize_rows(f_s, NORM_EPS)?;
    let diff = g.sub(student, target)?;
    Ok(mean_row_sq_norm(g, diff))
}

/// Batch-hard mining over row-major `N×d` embeddings: for each anchor the
/// farthest same-class sample and the nearest other-class sample (squared
/// Euclidean distance, ties to the lowest index). Anchors lacking either are skipped.
pub fn mine_triplets<T: Element>(embeddings: &[T], dim: usize, labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    assert_eq!(embeddings.len(), n * dim, "embedding rows must match labels");
    let row = |i: usize| &embeddings[i * dim..(i + 1) * dim];
    let dist = |i: usize, j: usize| -> f64 {
        row(i)
            .iter()
            .zip(row(j))
            .map(|(&a, &b)| {
                let d = (a - b).as_f64();
                d * d
            })
            .sum()
    };
    let mut out = Vec::new();
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (pos, neg) {
            out.push((a, p, q));
        }
    }
    out
}

/// `(1/|T|)·Σ max(0, ‖A−P‖² − ‖A−N‖² + m)` over `triples`; zero when there are none.
pub fn triplet_loss<T: Element>(g: &mut Graph<T>, embeddings: Var, triples: &[(usize, usize, usize)], margin: f64) -> Result<Var> {
    let s = g.shape(embeddings).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("triplet_loss", &s, &[]));
    }
    if triples.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    if let Some(t) = triples.iter().find(|t| t.0 >= s[0] || t.1 >= s[0] || t.2 >= s[0]) {
        return Err(Error::contract(format!("triplet {t:?} indexes outside {} embeddings", s[0])));
    }
    let pick = |g: &mut Graph<T>, f: fn(&(usize, usize, usize)) -> usize| -> Result<Var> {
        let idx: Vec<usize> = triples.iter().map(f).collect();
        g.index_select(embeddings, &idx)
    };
    let a = pick(g, |t| t.0)?;
    let p = pick(g, |t| t.1)?;
    let n = pick(g, |t| t.2)?;
    let sq_dist = |g: &mut Graph<T>, x: Var, y: Var| -> Result<Var> {
        let d = g.sub(x, y)?;
        let d2 = g.mul(d, d)?;
        g.sum_axes(d2, &[1])
    };
    let dap = sq_dist(g, a, p)?;
    let dan = sq_dist(g, a, n)?;
    let gap = g.sub(dap, dan)?;
    let shifted = g.add_scalar(gap, T::of(margin));
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

fn scalar<T: Element>(g: &Graph<T>, v: Var) -> f64 {
    g.data(v)[0].as_f64()
}

/// Weighted training objective with every term enabled.
pub fn total_loss<T: Element>(g: &mut Graph<T>, bundle: &ForwardBundle<T>, labels: &[usize], weights: &LossWeights) -> Result<(Var, LossReport)> {
    ablated_loss(g, bundle, labels, weights, AblationFlags::default())
}

/// Weighted training objective:
/// `λ_CE·CE_T + λ_S·(CE_S1 + CE_S2) + λ_L·(L_S1 + L_S2) + λ_H·(H_S1 + H_S2) + λ_trip·Trip`.
///
/// Terms with zero weight are reported but left out of the graph. Under
/// `no_sd` the student terms are dropped and the students need not be present.
pub fn ablated_loss<T: Element>(
    g: &mut Graph<T>,
    bundle: &ForwardBundle<T>,
    labels: &[usize],
    weights: &LossWeights,
    flags: AblationFlags,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let teacher = bundle
        .teacher
        .ok_or_else(|| Error::contract("loss needs the teacher head"))?;
    let students: Vec<HeadOutput> = if flags.no_sd {
        Vec::new()
    } else {
        match (bundle.s1, bundle.s2) {
            (Some(a), Some(b)) => vec![a, b],
            _ => return Err(Error::contract("loss needs both student heads (train-mode bundle)")),
        }
    };

    let mut report = LossReport::default();
    let mut terms: Vec<(Var, f64)> = Vec::new();

    let ce_t = cross_entropy(g, teacher.logits, labels)?;
    report.ce_teacher = scalar(g, ce_t);
    terms.push((ce_t, weights.ce));

    for (i, s) in students.iter().enumerate() {
        let ce = cross_entropy(g, s.logits, labels)?;
        let lg = logit_distillation(g, teacher.logits, s.logits)?;
        let ht = hint_loss(g, teacher.features, s.features)?;
        let (ce_v, lg_v, ht_v) = (scalar(g, ce), scalar(g, lg), scalar(g, ht));
        if i == 0 {
            (report.ce_s1, report.logit_s1, report.hint_s1) = (ce_v, lg_v, ht_v);
        } else {
            (report.ce_s2, report.logit_s2, report.hint_s2) = (ce_v, lg_v, ht_v);
        }
        terms.extend([(ce, weights.student_ce), (lg, weights.logit), (ht, weights.hint)]);
    }

    let dim = g.shape(teacher.features)[1];
    let triples = mine_triplets(g.data(teacher.features), dim, labels);
    let trip = triplet_loss(g, teacher.features, &triples, weights.margin)?;
    report.triplet = scalar(g, trip);
    let trip_weight = if flags.no_triplet { 0.0 } else { weights.triplet };
    terms.push((trip, trip_weight));

    let mut total: Option<Var> = None;
    for (v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { v } else { g.mul_scalar(v, T::of(w)) };
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())));
    report.total = scalar(g, total);
    Ok((total, report))
}
