use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWConfig};
use super::schedule::{cosine_lr, ScheduleConfig};
use crate::error::{Error, Result};
use crate::layers::{Binder, Mode, ParamId};
use crate::losses::{ablated_loss, AblationFlags, LossReport, LossWeights};
use crate::metrics::{confusion, ConfusionMatrix};
use crate::model::{argmax_rows, Head, HeadSet, SdhsiModel};
use crate::preprocess::PatchSet;
use crate::tensor::{Element, Graph, Tensor};

/// Stream of the shuffle / dropout generator; stream 0 is left for initialisation.
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub weights: LossWeights,
    pub flags: AblationFlags,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

/// Validation overall accuracy of each head present in the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    pub teacher: Option<f64>,
}

impl HeadAccuracy {
    pub fn get(&self, head: Head) -> Option<f64> {
        match head {
            Head::S1 => self.s1,
            Head::S2 => self.s2,
            Head::Teacher => self.teacher,
        }
    }

    fn set(&mut self, head: Head, v: f64) {
        match head {
            Head::S1 => self.s1 = Some(v),
            Head::S2 => self.s2 = Some(v),
            Head::Teacher => self.teacher = Some(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    /// Sample-weighted mean of the per-batch loss terms.
    pub loss: LossReport,
    pub val_oa: HeadAccuracy,
    /// Not serialized, so that logs of identical runs stay byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_seconds).sum()
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome<T: Element = f32> {
    pub log: TrainLog,
    pub optimizer: AdamW<T>,
}

/// Splits shuffled indices into batches; a trailing single sample joins the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn input_tensor<T: Element>(set: &PatchSet, indices: &[usize]) -> Result<Tensor<T>> {
    let (b, s) = (set.bands(), set.size());
    let data = set.gather(indices).into_iter().map(|v| T::of(v as f64)).collect();
    Tensor::new(vec![indices.len(), 1, b, s, s], data)
}

/// Trains `model` in place.
///
/// Under `no_sd` only the teacher path is optimized; the student heads are
/// neither run nor updated.
pub fn train<T: Element>(
    model: &mut SdhsiModel<T>,
    train_set: &PatchSet,
    val_set: &PatchSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.schedule.validate()?;
    cfg.weights.validate()?;
    let mc = model.config();
    for (op, set) in [("training patch set", train_set), ("validation patch set", val_set)] {
        if !set.is_empty() && (set.bands() != mc.bands || set.size() != mc.patch) {
            return Err(Error::shape(op, &[set.bands(), set.size()], &[mc.bands, mc.patch]));
        }
    }
    if train_set.len() < 2 {
        return Err(Error::EmptyDataset(format!(
            "training needs at least 2 samples, got {}",
            train_set.len()
        )));
    }
    let heads = if cfg.flags.no_sd {
        HeadSet::TEACHER
    } else {
        if !model.has_students() {
            return Err(Error::config("self-distillation needs a model with student heads"));
        }
        HeadSet::ALL
    };
    let trainable: Vec<ParamId> = if cfg.flags.no_sd {
        model.path_params(Head::Teacher)
    } else {
        model.params().ids().collect()
    };
    let mut optimizer = AdamW::new(model.params(), trainable.clone(), cfg.optimizer);
    let mut log = TrainLog::default();
    if cfg.schedule.epochs == 0 {
        return Ok(TrainOutcome { log, optimizer });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let labels = train_set.labels();

    for epoch in 0..cfg.schedule.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, &cfg.schedule)?;
        order.shuffle(&mut rng);
        let mut epoch_loss = LossReport::default();
        let batch_list = batches(&order, cfg.schedule.batch_size);
        for (bi, idx) in batch_list.iter().enumerate() {
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(input_tensor(train_set, idx)?);
            let (report, grads, updates) = {
                let mut binder = Binder::new(model.params(), true);
                let bundle = model.forward(&mut g, &mut binder, x, Mode::Train, heads, &mut rng)?;
                let (loss, report) = ablated_loss(&mut g, &bundle, &batch_labels, &cfg.weights, cfg.flags)?;
                if !report.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: bi,
                        detail: format!("non-finite loss {report:?}"),
                    });
                }
                g.backward(loss)?;
                let bound: Vec<Option<crate::tensor::Var>> = {
                    let mut v = vec![None; model.params().len()];
                    for (id, var) in binder.bound() {
                        v[id.index()] = Some(var);
                    }
                    v
                };
                // Parameters that the loss did not reach get a zero gradient.
                let grads: Vec<Vec<T>> = trainable
                    .iter()
                    .map(|&id| {
                        let n = model.params().get(id).numel();
                        bound[id.index()]
                            .and_then(|v| g.grad(v))
                            .map_or_else(|| vec![T::zero(); n], <[T]>::to_vec)
                    })
                    .collect();
                (report, grads, bundle.bn_updates)
            };
            let pos: Vec<Option<usize>> = {
                let mut p = vec![None; model.params().len()];
                for (k, id) in trainable.iter().enumerate() {
                    p[id.index()] = Some(k);
                }
                p
            };
            optimizer.step(
                model.params_mut(),
                |id| pos[id.index()].map(|k| grads[k].as_slice()),
                lr,
            )?;
            model.apply_bn_updates(&updates);
            epoch_loss.add_scaled(&report, idx.len() as f64 / train_set.len() as f64);
        }

        let mut val_oa = HeadAccuracy::default();
        if !val_set.is_empty() {
            let heads: Vec<Head> = Head::ALL.into_iter().filter(|&h| model.supports(h)).collect();
            for (&head, cm) in heads.iter().zip(evaluate_many(model, val_set, &heads, cfg.schedule.batch_size)?) {
                val_oa.set(head, cm.oa()?);
            }
        }
        let entry = EpochLog {
            epoch,
            lr,
            batches: batch_list.len(),
            loss: epoch_loss,
            val_oa,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {:.5}", entry.loss.total);
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(TrainOutcome { log, optimizer })
}

/// Eval-mode class predictions of `head` for every sample of `set`.
pub fn predict<T: Element>(model: &SdhsiModel<T>, set: &PatchSet, head: Head, batch_size: usize) -> Result<Vec<usize>> {
    Ok(predict_many(model, set, &[head], batch_size)?.pop().expect("one head requested"))
}

/// Predictions of several heads, sharing each batch's forward pass.
pub fn predict_many<T: Element>(
    model: &SdhsiModel<T>,
    set: &PatchSet,
    heads: &[Head],
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let k = model.config().classes;
    let mut out = vec![Vec::with_capacity(set.len()); heads.len()];
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(batch_size) {
        let x = input_tensor::<T>(set, idx)?;
        for (preds, logits) in out.iter_mut().zip(model.logits_many(x.data(), heads)?) {
            preds.extend(argmax_rows(&logits, k));
        }
    }
    Ok(out)
}

/// Confusion matrix of `head` on `set`.
pub fn evaluate<T: Element>(
    model: &SdhsiModel<T>,
    set: &PatchSet,
    head: Head,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    Ok(evaluate_many(model, set, &[head], batch_size)?.pop().expect("one head requested"))
}

/// Confusion matrices of several heads, in `heads` order.
pub fn evaluate_many<T: Element>(
    model: &SdhsiModel<T>,
    set: &PatchSet,
    heads: &[Head],
    batch_size: usize,
) -> Result<Vec<ConfusionMatrix>> {
    predict_many(model, set, heads, batch_size)?
        .iter()
        .map(|p| confusion(p, set.labels(), model.config().classes))
        .collect()
}
