use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdhsi::layers::{Binder, DropBlockConfig, Mode, ParamId};
use sdhsi::losses::{self, AblationFlags, LossWeights};
use sdhsi::metrics::ConfusionMatrix;
use sdhsi::model::{ForwardBundle, Head, HeadOutput, HeadSet, SdhsiConfig, SdhsiModel};
use sdhsi::preprocess::{pca_fit, pca_transform, HsiCube};
use sdhsi::{Graph, Tensor, Var};

use super::grad::{self, rel_err, uniform, Stats};

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{what}: got {got:.15e}, expected {want:.15e} (tol {tol:e})"))
}

// ---------------------------------------------------------------- gradients

/// Small architecture with every layer kind of the full network.
pub fn tiny_config(rng: &mut ChaCha8Rng) -> SdhsiConfig {
    let bands = grad::dim(rng, 5, 7);
    let classes = grad::dim(rng, 2, 4);
    SdhsiConfig {
        conv3d_channels: vec![2, 3],
        conv3d_spectral_kernels: vec![3, 2],
        conv2d_channels: vec![grad::dim(rng, 3, 5)],
        head_pool: 2,
        fc_widths: vec![6, 4],
        dropout: 0.3,
        dropblock: DropBlockConfig {
            block_size: 3,
            drop_prob: 0.2,
        },
        student_hidden: 4,
        student_tokens: 2,
        ..SdhsiConfig::new(5, bands, classes)
    }
}

fn model_loss(
    model: &SdhsiModel<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    weights: &LossWeights,
    dropout_seed: u64,
    backward: bool,
) -> sdhsi::Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
    let mut g = Graph::new();
    let mut binder = Binder::new(model.params(), backward);
    let x = g.constant(input.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let bundle = model.forward(&mut g, &mut binder, x, Mode::Train, HeadSet::ALL, &mut rng)?;
    let (loss, _) = losses::total_loss(&mut g, &bundle, labels, weights)?;
    let value = g.data(loss)[0];
    if !backward {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = binder
        .bound()
        .map(|(id, v)| (id, g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();
    Ok((value, grads))
}

/// Finite-difference check of the full training objective on a tiny model.
///
/// Teacher targets of the distillation terms are constants to autodiff, so
/// those terms are switched off when differentiating shared parameters and
/// checked separately on the student-only parameters, which cannot move the
/// teacher outputs.
pub fn model_gradient_case(seed: u64, per_tensor: usize) -> Result<Stats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(&mut rng);
    let mut model = SdhsiModel::<f64>::build(&cfg, &mut rng).map_err(|e| e.to_string())?;
    // Zero-initialised shifts put relu inputs exactly on the kink whenever dropout
    // clears a whole row; evaluate at a generic point instead.
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        if name.ends_with(".bias") || name.ends_with(".beta") {
            model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    let n = grad::dim(&mut rng, 2, 4);
    let input = uniform(&[n, 1, cfg.bands, cfg.patch, cfg.patch], -1.0, 1.0, &mut rng);
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.classes)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let dropout_seed = rng.random::<u64>();
    let shared = LossWeights {
        logit: 0.0,
        hint: 0.0,
        triplet: 0.5,
        margin: 1.0,
        ..LossWeights::default()
    };
    let distill = LossWeights {
        logit: 0.7,
        hint: 0.9,
        ..shared
    };
    let students: Vec<ParamId> = [Head::S1, Head::S2].iter().flat_map(|&h| model.student_params(h)).collect();
    let all: Vec<ParamId> = model.params().ids().collect();

    let mut stats = Stats::default();
    for (weights, ids, what) in [(shared, &all, "ce+triplet"), (distill, &students, "distillation")] {
        let label = format!("total_loss/{what} (seed {seed})");
        let (_, grads) = model_loss(&model, &input, &labels, &weights, dropout_seed, true).map_err(|e| format!("{label}: {e}"))?;
        for &id in ids {
            let analytic = grads.iter().find(|(g, _)| *g == id).map(|(_, v)| v.clone()).unwrap_or_default();
            let numel = model.params().get(id).numel();
            for _ in 0..per_tensor.min(numel) {
                let k = rng.random_range(0..numel);
                let a = analytic.get(k).copied().unwrap_or(0.0);
                let eval = |delta: f64| -> Result<f64, String> {
                    let mut m = model.clone();
                    m.params_mut().get_mut(id).data_mut()[k] += delta;
                    model_loss(&m, &input, &labels, &weights, dropout_seed, false)
                        .map(|r| r.0)
                        .map_err(|e| format!("{label}: {e}"))
                };
                let num = (eval(grad::STEP)? - eval(-grad::STEP)?) / (2.0 * grad::STEP);
                let err = rel_err(a, num);
                ensure(err <= grad::TOL, || {
                    format!(
                        "{label}: {} entry {k}: analytic {a:.10e} vs numeric {num:.10e} (rel err {err:.2e})",
                        model.params().name(id)
                    )
                })?;
                stats.entries += 1;
                stats.worst = stats.worst.max(err);
            }
        }
    }
    stats.cases = 1;
    Ok(stats)
}

/// Finite-difference checks of every op and layer over `shapes` random shapes each.
pub fn gradient_suite(shapes: usize) -> Result<String, String> {
    let mut total = Stats::default();
    let cases = grad::op_cases();
    for (i, (name, gen)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        for c in 0..shapes {
            let case = gen(&mut rng);
            total.merge(grad::check(&format!("{name} case {c}"), &case, (i * 1000 + c) as u64)?);
        }
    }
    for c in 0..shapes {
        total.merge(model_gradient_case(c as u64, 3)?);
    }
    Ok(format!(
        "{} ops and layers plus the tiny-model objective, {} shapes each: {} entries, worst rel err {:.1e}",
        cases.len(),
        shapes,
        total.entries,
        total.worst
    ))
}

// ---------------------------------------------------------------- losses

fn matrix(g: &mut Graph<f64>, rows: usize, cols: usize, data: &[f64]) -> Var {
    g.constant(Tensor::new(vec![rows, cols], data.to_vec()).unwrap())
}

fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.data(v)[0]
}

fn rows(data: &[f64], d: usize) -> Vec<&[f64]> {
    data.chunks(d).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn oracle_logit(zt: &[f64], zs: &[f64], k: usize) -> f64 {
    let (t, s) = (rows(zt, k), rows(zs, k));
    t.iter().zip(&s).map(|(a, b)| sq_dist(a, b)).sum::<f64>() / t.len() as f64
}

fn oracle_hint(ft: &[f64], fs: &[f64], d: usize) -> f64 {
    let unit = |r: &[f64]| -> Vec<f64> {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| v / n).collect()
    };
    let (t, s) = (rows(ft, d), rows(fs, d));
    t.iter().zip(&s).map(|(a, b)| sq_dist(&unit(a), &unit(b))).sum::<f64>() / t.len() as f64
}

/// Batch-hard triplet loss by exhaustive search over every anchor.
fn oracle_triplet(e: &[f64], d: usize, labels: &[usize], margin: f64) -> f64 {
    let r = rows(e, d);
    let mut terms = Vec::new();
    for a in 0..r.len() {
        let hardest_pos = (0..r.len())
            .filter(|&j| j != a && labels[j] == labels[a])
            .map(|j| sq_dist(r[a], r[j]))
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let hardest_neg = (0..r.len())
            .filter(|&j| labels[j] != labels[a])
            .map(|j| sq_dist(r[a], r[j]))
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
        if let (Some(p), Some(n)) = (hardest_pos, hardest_neg) {
            terms.push((p - n + margin).max(0.0));
        }
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

fn oracle_ce(z: &[f64], k: usize, labels: &[usize]) -> f64 {
    rows(z, k)
        .iter()
        .zip(labels)
        .map(|(r, &l)| {
            let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - r[l]
        })
        .sum::<f64>()
        / labels.len() as f64
}

fn triplet_value(e: &[f64], n: usize, d: usize, labels: &[usize], margin: f64) -> Result<f64, String> {
    let mut g = Graph::new();
    let v = matrix(&mut g, n, d, e);
    let triples = losses::mine_triplets(e, d, labels);
    let l = losses::triplet_loss(&mut g, v, &triples, margin).map_err(|e| e.to_string())?;
    Ok(value(&g, l))
}

fn head(g: &mut Graph<f64>, logits: &[f64], features: &[f64], n: usize, k: usize, d: usize) -> HeadOutput {
    HeadOutput {
        logits: matrix(g, n, k, logits),
        features: matrix(g, n, d, features),
    }
}

fn analytic_values() -> Result<(), String> {
    let tol = 1e-6;
    let mut g = Graph::<f64>::new();

    let peaked = matrix(&mut g, 2, 3, &[0.0, 40.0, 0.0, 50.0, 0.0, 0.0]);
    let l = losses::cross_entropy(&mut g, peaked, &[1, 0]).map_err(|e| e.to_string())?;
    close("cross-entropy of strongly peaked logits", value(&g, l), 0.0, tol)?;
    let uniform3 = matrix(&mut g, 1, 3, &[0.7, 0.7, 0.7]);
    let l = losses::cross_entropy(&mut g, uniform3, &[2]).map_err(|e| e.to_string())?;
    close("cross-entropy of uniform logits, K=3", value(&g, l), 3f64.ln(), tol)?;

    let z = matrix(&mut g, 2, 2, &[0.3, -1.0, 2.0, 0.5]);
    let l = losses::logit_distillation(&mut g, z, z).map_err(|e| e.to_string())?;
    close("logit distillation of equal logits", value(&g, l), 0.0, tol)?;
    let zt = matrix(&mut g, 1, 2, &[1.0, 0.0]);
    let zs = matrix(&mut g, 1, 2, &[0.0, 0.0]);
    let l = losses::logit_distillation(&mut g, zt, zs).map_err(|e| e.to_string())?;
    close("logit distillation [1,0] vs [0,0]", value(&g, l), 1.0, tol)?;

    let f = matrix(&mut g, 2, 3, &[1.0, 2.0, -0.5, 0.1, 0.0, 3.0]);
    let l = losses::hint_loss(&mut g, f, f).map_err(|e| e.to_string())?;
    close("hint loss of equal features", value(&g, l), 0.0, tol)?;
    let e1 = matrix(&mut g, 1, 3, &[1.0, 0.0, 0.0]);
    let e2 = matrix(&mut g, 1, 3, &[0.0, 1.0, 0.0]);
    let l = losses::hint_loss(&mut g, e1, e2).map_err(|e| e.to_string())?;
    close("hint loss of orthonormal features", value(&g, l), 2.0, tol)?;
    let scaled = g.mul_scalar(f, 3.7);
    let l = losses::hint_loss(&mut g, f, scaled).map_err(|e| e.to_string())?;
    close("hint loss of positively scaled features", value(&g, l), 0.0, tol)?;

    let e = [0.0, 0.0, 1.0, 0.0, 3.0, 3.0, 4.0, 3.0];
    ensure(losses::mine_triplets(&e, 2, &[2, 2, 2, 2]).is_empty(), || "single-class batch mined triplets".into())?;
    let n = losses::mine_triplets(&e, 2, &[0, 0, 1, 1]).len();
    ensure(n == 4, || format!("2 classes x 2 samples mined {n} triplets, expected 4"))?;

    let emb = matrix(&mut g, 3, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let l = losses::triplet_loss(&mut g, emb, &[(0, 1, 2)], 0.2).map_err(|e| e.to_string())?;
    close("triplet with A=P and distant negative", value(&g, l), 0.0, tol)?;
    let emb = matrix(&mut g, 3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.1]);
    let l = losses::triplet_loss(&mut g, emb, &[(0, 1, 2)], 0.2).map_err(|e| e.to_string())?;
    close("triplet A=[0,0] P=[1,0] N=[1,0.1] m=0.2", value(&g, l), 0.19, tol)?;

    // Only the CE weights active: the total is exactly the sum of the CE terms.
    let (n, k, d) = (4, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let labels = [0, 1, 2, 1];
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (zt, zs1, zs2) = (draw(n * k), draw(n * k), draw(n * k));
    let (ft, fs1, fs2) = (draw(n * d), draw(n * d), draw(n * d));
    let bundle = ForwardBundle {
        teacher: Some(head(&mut g, &zt, &ft, n, k, d)),
        s1: Some(head(&mut g, &zs1, &fs1, n, k, d)),
        s2: Some(head(&mut g, &zs2, &fs2, n, k, d)),
        bn_updates: Vec::new(),
    };
    let ce_only = LossWeights::default().ce_only();
    let (total, report) = losses::total_loss(&mut g, &bundle, &labels, &ce_only).map_err(|e| e.to_string())?;
    let want = oracle_ce(&zt, k, &labels) + oracle_ce(&zs1, k, &labels) + oracle_ce(&zs2, k, &labels);
    close("total with only CE weights", value(&g, total), want, tol)?;
    close("report total with only CE weights", report.total, want, tol)?;

    // Confident, identical heads on a single-class batch: every term vanishes.
    let (n, k) = (3, 3);
    let logits: Vec<f64> = (0..n).flat_map(|_| [60.0, 0.0, 0.0]).collect();
    let feats: Vec<f64> = (0..n).flat_map(|_| [1.0, 2.0]).collect();
    let bundle = ForwardBundle {
        teacher: Some(head(&mut g, &logits, &feats, n, k, 2)),
        s1: Some(head(&mut g, &logits, &feats, n, k, 2)),
        s2: Some(head(&mut g, &logits, &feats, n, k, 2)),
        bn_updates: Vec::new(),
    };
    let (total, _) = losses::total_loss(&mut g, &bundle, &[0, 0, 0], &LossWeights::default()).map_err(|e| e.to_string())?;
    close("total for confident identical heads", value(&g, total), 0.0, tol)?;

    let eval_bundle = ForwardBundle {
        teacher: Some(head(&mut g, &logits, &feats, n, k, 2)),
        s1: None,
        s2: None,
        bn_updates: Vec::new(),
    };
    ensure(
        losses::total_loss(&mut g, &eval_bundle, &[0, 0, 0], &LossWeights::default()).is_err(),
        || "total loss accepted an eval-mode bundle".into(),
    )?;
    Ok(())
}

/// Analytic values, brute-force oracles and invariances of the training objectives.
pub fn loss_suite(random_cases: usize) -> Result<String, String> {
    analytic_values()?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..random_cases {
        let (n, k, d) = (grad::dim(&mut rng, 1, 12), grad::dim(&mut rng, 2, 8), grad::dim(&mut rng, 1, 10));
        let draw = |rng: &mut ChaCha8Rng, len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(-s..s)).collect() };
        let (zt, zs) = (draw(&mut rng, n * k, 4.0), draw(&mut rng, n * k, 4.0));
        let (ft, fs) = (draw(&mut rng, n * d, 2.0), draw(&mut rng, n * d, 2.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let margin = rng.random_range(0.05..1.5);

        let mut g = Graph::<f64>::new();
        let (vt, vs) = (matrix(&mut g, n, k, &zt), matrix(&mut g, n, k, &zs));
        let l = losses::logit_distillation(&mut g, vt, vs).map_err(|e| e.to_string())?;
        let want = oracle_logit(&zt, &zs, k);
        close(&format!("logit distillation case {case}"), value(&g, l), want, 1e-9 * want.max(1.0))?;
        worst = worst.max((value(&g, l) - want).abs());

        let (ut, us) = (matrix(&mut g, n, d, &ft), matrix(&mut g, n, d, &fs));
        let l = losses::hint_loss(&mut g, ut, us).map_err(|e| e.to_string())?;
        let want = oracle_hint(&ft, &fs, d);
        close(&format!("hint loss case {case}"), value(&g, l), want, 1e-9)?;
        worst = worst.max((value(&g, l) - want).abs());

        let got = triplet_value(&ft, n, d, &labels, margin)?;
        let want = oracle_triplet(&ft, d, &labels, margin);
        close(&format!("triplet loss case {case}"), got, want, 1e-9)?;
        worst = worst.max((got - want).abs());

        // Scale invariance of the hint loss.
        let c = 10f64.powf(rng.random_range(-2.0..2.0));
        let scaled: Vec<f64> = ft.iter().map(|v| v * c).collect();
        let mut g = Graph::<f64>::new();
        let (a, b) = (matrix(&mut g, n, d, &ft), matrix(&mut g, n, d, &scaled));
        let l = losses::hint_loss(&mut g, a, b).map_err(|e| e.to_string())?;
        close(&format!("hint scale invariance case {case} (c = {c:.3})"), value(&g, l), 0.0, 1e-9)?;

        // Translation invariance of the triplet loss.
        let shift: Vec<f64> = draw(&mut rng, d, 5.0);
        let moved: Vec<f64> = ft.iter().enumerate().map(|(i, v)| v + shift[i % d]).collect();
        let moved_value = triplet_value(&moved, n, d, &labels, margin)?;
        close(&format!("triplet translation invariance case {case}"), moved_value, got, 1e-9 * got.max(1.0))?;

        // Stop-gradient: no gradient reaches the teacher side.
        let mut g = Graph::<f64>::new();
        let (pt, ps) = (g.param(Tensor::new(vec![n, k], zt.clone()).unwrap()), g.param(Tensor::new(vec![n, k], zs.clone()).unwrap()));
        let (qt, qs) = (g.param(Tensor::new(vec![n, d], ft.clone()).unwrap()), g.param(Tensor::new(vec![n, d], fs.clone()).unwrap()));
        let a = losses::logit_distillation(&mut g, pt, ps).map_err(|e| e.to_string())?;
        let b = losses::hint_loss(&mut g, qt, qs).map_err(|e| e.to_string())?;
        let sum = g.add(a, b).map_err(|e| e.to_string())?;
        g.backward(sum).map_err(|e| e.to_string())?;
        let zero = |v: Var| g.grad(v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0));
        ensure(zero(pt) && zero(qt), || format!("case {case}: gradient reached teacher inputs"))?;
        // A unit-normalised 1-d row is constant (±1), so the hint gradient vanishes there.
        ensure(!zero(ps) && (d == 1 || !zero(qs)), || format!("case {case}: no gradient reached student inputs"))?;
        for (what, v) in [("logit", value(&g, a)), ("hint", value(&g, b)), ("triplet", got)] {
            ensure(v >= 0.0, || format!("case {case}: negative {what} loss {v}"))?;
        }
    }

    // no_sd drops every student term; the students may be absent.
    let mut g = Graph::<f64>::new();
    let logits = [0.2, -0.1, 0.4, 1.0, 0.0, -1.0];
    let feats = [0.5, 0.1, -0.3, 0.7];
    let bundle = ForwardBundle {
        teacher: Some(head(&mut g, &logits, &feats, 2, 3, 2)),
        s1: None,
        s2: None,
        bn_updates: Vec::new(),
    };
    let flags = AblationFlags {
        no_sd: true,
        no_triplet: true,
    };
    let (_, report) = losses::ablated_loss(&mut g, &bundle, &[0, 1], &LossWeights::default(), flags).map_err(|e| e.to_string())?;
    close("no_sd, no_triplet total", report.total, oracle_ce(&logits, 3, &[0, 1]), 1e-12)?;

    Ok(format!(
        "analytic values hold; {random_cases} random batches match the oracles (max abs dev {worst:.1e}); invariances hold"
    ))
}

// ---------------------------------------------------------------- metrics

struct NaiveScores {
    oa: f64,
    aa: f64,
    kappa: f64,
}

/// Textbook formulas, in floating point, straight from the counts.
fn naive_scores(k: usize, c: &[u64]) -> NaiveScores {
    let at = |t: usize, p: usize| c[t * k + p] as f64;
    let n: f64 = c.iter().map(|&v| v as f64).sum();
    let diag: f64 = (0..k).map(|i| at(i, i)).sum();
    let oa = diag / n;
    let mut recalls = Vec::new();
    for t in 0..k {
        let row: f64 = (0..k).map(|p| at(t, p)).sum();
        if row > 0.0 {
            recalls.push(at(t, t) / row);
        }
    }
    let aa = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let pe: f64 = (0..k)
        .map(|i| {
            let row: f64 = (0..k).map(|p| at(i, p)).sum();
            let col: f64 = (0..k).map(|t| at(t, i)).sum();
            (row / n) * (col / n)
        })
        .sum();
    let kappa = if (1.0 - pe).abs() < 1e-15 { 0.0 } else { (oa - pe) / (1.0 - pe) };
    NaiveScores { oa, aa, kappa }
}

/// OA / AA / κ against the naive formulas on random confusion matrices.
pub fn metric_suite(matrices: usize) -> Result<String, String> {
    let cm = |k: usize, v: &[u64]| ConfusionMatrix::from_counts(k, v.to_vec()).map_err(|e| e.to_string());
    let kappa = cm(2, &[4, 1, 2, 3])?.kappa().map_err(|e| e.to_string())?;
    ensure(kappa == 0.4, || format!("kappa([[4,1],[2,3]]) = {kappa:.17}, expected exactly 0.4"))?;
    let perfect = cm(2, &[5, 0, 0, 5])?;
    let s = sdhsi::metrics::Scores::of(&perfect).map_err(|e| e.to_string())?;
    ensure(s.oa == 1.0 && s.aa == 1.0 && s.kappa == 1.0, || format!("perfect agreement scored {s:?}"))?;
    let one_class = cm(2, &[5, 0, 5, 0])?;
    let k1 = one_class.kappa().map_err(|e| e.to_string())?;
    ensure(k1 == 0.0, || format!("constant prediction on balanced truth gave kappa {k1}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < matrices {
        let k = grad::dim(&mut rng, 2, 12);
        let density = rng.random_range(0.2..1.0);
        let diag_boost = rng.random_range(0..40);
        let counts: Vec<u64> = (0..k * k)
            .map(|i| {
                if rng.random::<f64>() > density {
                    return 0;
                }
                let base = rng.random_range(0..60);
                if i / k == i % k { base + diag_boost } else { base }
            })
            .collect();
        if counts.iter().sum::<u64>() == 0 {
            continue;
        }
        let m = cm(k, &counts)?;
        let want = naive_scores(k, &counts);
        let got = sdhsi::metrics::Scores::of(&m).map_err(|e| e.to_string())?;
        for (name, g, w) in [("OA", got.oa, want.oa), ("AA", got.aa, want.aa), ("kappa", got.kappa, want.kappa)] {
            close(&format!("{name} of matrix {done} (K={k})"), g, w, 1e-12)?;
            worst = worst.max((g - w).abs());
        }
        done += 1;
    }
    Ok(format!(
        "kappa([[4,1],[2,3]]) = 0.4 exactly; {matrices} random matrices match the naive formulas (max abs dev {worst:.1e})"
    ))
}

// ---------------------------------------------------------------- pca

fn random_cube(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> HsiCube {
    // Correlated bands with distinct scales, like real spectra.
    let mix: Vec<f64> = (0..c * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = (0..h * w)
        .flat_map(|_| {
            let z: Vec<f64> = (0..c).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64).collect();
            (0..c)
                .map(|i| 3.0 + (0..c).map(|j| mix[i * c + j] * z[j]).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect();
    HsiCube::new(h, w, c, data).unwrap()
}

/// Eigenpairs of the sample covariance by nalgebra, largest first.
fn oracle_eigen(cube: &HsiCube) -> (Vec<f64>, DMatrix<f64>) {
    let (n, c) = (cube.pixels(), cube.bands());
    let x = DMatrix::from_row_slice(n, c, cube.data());
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(c, c, |r, j| eig.eigenvectors[(r, order[j])]);
    (values, vectors)
}

/// PCA basis properties and agreement with a reference eigendecomposition.
pub fn pca_suite(cubes: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    let mut worst_oracle: f64 = 0.0;
    let mut worst_recon: f64 = 0.0;
    for case in 0..cubes {
        let cube = random_cube(&mut rng, 6, 6, 5);
        let c = cube.bands();
        let (values, vectors) = oracle_eigen(&cube);
        for b in 1..=c {
            let model = pca_fit(&cube, b).map_err(|e| e.to_string())?;
            for i in 0..b {
                for j in 0..b {
                    let dot: f64 = model.component(i).iter().zip(model.component(j)).map(|(x, y)| x * y).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    close(&format!("cube {case}, B={b}: <u{i}, u{j}>"), dot, want, 1e-8)?;
                }
            }
            for w in model.explained_variance.windows(2) {
                ensure(w[0] >= w[1], || format!("cube {case}, B={b}: explained variance increases: {:?}", model.explained_variance))?;
            }
            for j in 0..b {
                let got = model.explained_variance[j];
                close(&format!("cube {case}: eigenvalue {j}"), got, values[j], 1e-8 * values[0].max(1.0))?;
                let u = model.component(j);
                let sign = if (0..c).map(|i| u[i] * vectors[(i, j)]).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
                for (i, &ui) in u.iter().enumerate() {
                    let dev = (ui - sign * vectors[(i, j)]).abs();
                    worst_oracle = worst_oracle.max(dev);
                    ensure(dev <= 1e-8, || format!("cube {case}: component {j} entry {i} deviates by {dev:.2e}"))?;
                }
            }

            let projected = pca_transform(&model, &cube).map_err(|e| e.to_string())?;
            let n = cube.pixels() as f64;
            for j in 0..b {
                let col: Vec<f64> = projected.data().chunks(b).map(|r| r[j]).collect();
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
                let ev = model.explained_variance[j];
                close(&format!("cube {case}, B={b}: variance of component {j}"), var, ev, 1e-6 * ev.max(1e-12))?;
            }
            let mut energy_in = 0.0;
            let mut energy_out = 0.0;
            for (px, coords) in cube.data().chunks(c).zip(projected.data().chunks(b)) {
                energy_in += px.iter().zip(&model.mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
                energy_out += coords.iter().map(|v| v * v).sum::<f64>();
            }
            ensure(energy_out <= energy_in * (1.0 + 1e-12), || format!("cube {case}, B={b}: projection gained energy"))?;
            let mut at_mean = vec![0.0; b];
            model.project(&model.mean, &mut at_mean);
            ensure(at_mean.iter().all(|v| v.abs() < 1e-12), || format!("cube {case}: mean spectrum projects to {at_mean:?}"))?;
            if b == c {
                for (px, coords) in cube.data().chunks(c).zip(projected.data().chunks(b)) {
                    let back = model.reconstruct(coords);
                    for (x, y) in px.iter().zip(&back) {
                        worst_recon = worst_recon.max((x - y).abs());
                    }
                }
                ensure(worst_recon <= 1e-6, || format!("cube {case}: full-rank reconstruction error {worst_recon:.2e}"))?;
            }
        }
    }
    Ok(format!(
        "{cubes} random 6x6x5 cubes: orthonormal bases, ordered variances, max deviation from reference eigenvectors {worst_oracle:.1e}, full reconstruction error {worst_recon:.1e}"
    ))
}
