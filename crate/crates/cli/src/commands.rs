use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdhsi::io::{default_palette, render_map, save_checkpoint, side_by_side, write_ppm, write_scene, Checkpoint, Rgb};
use sdhsi::metrics::Scores;
use sdhsi::model::{Head, SdhsiConfig, SdhsiModel};
use sdhsi::optim::{self, measure_inference, TrainConfig, TrainLog};
use sdhsi::preprocess::{extract_patches, synth_scene, PatchSet, SplitConfig, SynthConfig};
use serde::Serialize;

use crate::args::{banner, EvalArgs, MapArgs, RunConfig, Subset, SynthArgs, TrainArgs};
use crate::pipeline::{self, make_splits, Splits};
use crate::table::{pct, Table};

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        height: a.height,
        width: a.width,
        bands: a.bands,
        classes: a.classes,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    print!("{}", banner("synth", &cfg));
    let (cube, labels) = synth_scene(&cfg)?;
    let names = (1..=cfg.classes).map(|k| format!("class {k}")).collect();
    write_scene(&cube, &labels, Some(names), &a.out).with_context(|| format!("writing scene to {}", a.out.display()))?;
    println!("wrote {}x{}x{} scene with {} classes to {}", a.height, a.width, a.bands, a.classes, a.out.display());
    Ok(())
}

/// Trained model plus its test-set scores, in `Head::ALL` order.
pub struct TrainedRun {
    pub model: SdhsiModel<f32>,
    pub optimizer: sdhsi::optim::AdamW<f32>,
    pub log: TrainLog,
    pub scores: Vec<(Head, Option<Scores>)>,
}

/// Builds and trains a model on prepared splits; `seed` drives initialisation and batching.
pub fn train_on(cfg: &RunConfig, splits: &Splits, bands: usize, classes: usize, seed: u64, label: &str) -> Result<TrainedRun> {
    let model_cfg = SdhsiConfig::new(cfg.patch, bands, classes);
    let mut model = SdhsiModel::<f32>::build(&model_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let train_cfg = TrainConfig {
        schedule: cfg.schedule(),
        weights: cfg.weights,
        flags: cfg.flags,
        seed,
        ..TrainConfig::default()
    };
    let epochs = cfg.epochs;
    let outcome = optim::train(&mut model, &splits.train, &splits.val, &train_cfg, |e| {
        let val = |h: Head| e.val_oa.get(h).map_or_else(|| "-".to_string(), pct);
        log::info!(
            "{label}epoch {:>3}/{epochs}  lr {:.2e}  loss {:.4}  val OA s1 {} s2 {} teacher {}  ({:.1}s)",
            e.epoch + 1,
            e.lr,
            e.loss.total,
            val(Head::S1),
            val(Head::S2),
            val(Head::Teacher),
            e.wall_seconds
        );
    })
    .context("training")?;
    let scores = score_heads(&model, &splits.test, cfg.batch)?;
    Ok(TrainedRun {
        model,
        optimizer: outcome.optimizer,
        log: outcome.log,
        scores,
    })
}

fn score_heads(model: &SdhsiModel<f32>, set: &PatchSet, batch: usize) -> Result<Vec<(Head, Option<Scores>)>> {
    let heads: Vec<Head> = Head::ALL.into_iter().filter(|&h| model.supports(h)).collect();
    if set.is_empty() {
        return Ok(heads.into_iter().map(|h| (h, None)).collect());
    }
    let cms = optim::evaluate_many(model, set, &heads, batch)?;
    heads
        .into_iter()
        .zip(cms)
        .map(|(h, cm)| Ok((h, Some(Scores::of(&cm)?))))
        .collect()
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    seed: u64,
    split: [f64; 3],
    patch: usize,
    pca: usize,
    scene: &'a sdhsi::io::SceneHeader,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::from_args(&a.run)?;
    print!("{}", banner("train", &cfg));
    let scene = pipeline::load_scene(&cfg.scene)?;
    let reduced = pipeline::reduce(&scene, cfg.pca)?;
    let split_cfg = SplitConfig::new(cfg.split[0], cfg.split[1], cfg.split[2], cfg.seed)?;
    let splits = make_splits(&reduced.cube, &scene.labels, cfg.patch, &split_cfg)?;
    let bands = reduced.pca.bands_out;
    let run = train_on(&cfg, &splits, bands, scene.header.num_classes, cfg.seed, "")?;

    let out = &a.out;
    let metadata = serde_json::to_value(RunMetadata {
        seed: cfg.seed,
        split: cfg.split,
        patch: cfg.patch,
        pca: bands,
        scene: &scene.header,
    })?;
    let ckpt = Checkpoint {
        model: run.model,
        optimizer: Some(run.optimizer),
        pca: Some(reduced.pca),
        metadata,
    };
    save_checkpoint(&ckpt, &out.join("checkpoint")).context("writing checkpoint")?;
    if a.strip_students {
        let deploy = Checkpoint {
            model: ckpt.model.strip_students()?,
            optimizer: None,
            ..ckpt.clone()
        };
        save_checkpoint(&deploy, &out.join("deploy")).context("writing teacher-only checkpoint")?;
    }
    run.log.write_jsonl(&out.join("train_log.jsonl"))?;
    let timing: Vec<f64> = run.log.epochs.iter().map(|e| e.wall_seconds).collect();
    std::fs::write(out.join("timing.json"), serde_json::to_string(&timing)? + "\n")
        .with_context(|| format!("writing {}", out.join("timing.json").display()))?;

    let table = score_table(&ckpt.model, &run.scores, None);
    print!("{}", table.render());
    std::fs::write(out.join("metrics.tsv"), table.to_tsv())?;
    if let Some(p) = &a.tsv {
        std::fs::write(p, table.to_tsv()).with_context(|| format!("writing {}", p.display()))?;
    }
    println!(
        "trained {} epochs in {:.1}s; checkpoint written to {}",
        run.log.epochs.len(),
        run.log.total_seconds(),
        out.join("checkpoint").display()
    );
    Ok(())
}

fn score_table(model: &SdhsiModel<f32>, scores: &[(Head, Option<Scores>)], latency: Option<&[f64]>) -> Table {
    let mut header = vec!["head", "OA", "AA", "kappa", "params (M)"];
    if latency.is_some() {
        header.push("time (us)");
    }
    let mut t = Table::new(header);
    for (i, (h, s)) in scores.iter().enumerate() {
        let mut row = vec![h.to_string()];
        match s {
            Some(s) => row.extend([pct(s.oa), pct(s.aa), format!("{:.4}", s.kappa)]),
            None => row.extend(["-".into(), "-".into(), "-".into()]),
        }
        row.push(format!("{:.3}", model.count_params(*h) as f64 / 1e6));
        if let Some(l) = latency {
            row.push(format!("{:.1}", l[i]));
        }
        t.row(row);
    }
    t
}

fn checkpoint_split(ckpt: &Checkpoint) -> Result<(SplitConfig, usize)> {
    let m = &ckpt.metadata;
    let split: [f64; 3] = serde_json::from_value(m["split"].clone()).context("checkpoint metadata lacks `split`")?;
    let seed: u64 = serde_json::from_value(m["seed"].clone()).context("checkpoint metadata lacks `seed`")?;
    let cfg = SplitConfig::new(split[0], split[1], split[2], seed)?;
    Ok((cfg, ckpt.model.config().patch))
}

fn load_for_scene(checkpoint: &Path, scene: &pipeline::Scene) -> Result<(Checkpoint, sdhsi::preprocess::HsiCube)> {
    let ckpt = sdhsi::io::load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let Some(pca) = &ckpt.pca else {
        bail!("checkpoint {} carries no PCA model", checkpoint.display());
    };
    let cube = pipeline::reduce_with(scene, pca)?;
    if scene.header.num_classes != ckpt.model.config().classes {
        bail!(
            "scene has {} classes but the checkpoint was trained for {}",
            scene.header.num_classes,
            ckpt.model.config().classes
        );
    }
    Ok((ckpt, cube))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let scene = pipeline::load_scene(&a.scene)?;
    let (ckpt, cube) = load_for_scene(&a.checkpoint, &scene)?;
    let model = &ckpt.model;
    let heads: Vec<Head> = match a.head {
        Some(h) => {
            let h = Head::from(h);
            if !model.supports(h) {
                bail!("head {h} is not available: the checkpoint was saved without student heads");
            }
            vec![h]
        }
        None => Head::ALL.into_iter().filter(|&h| model.supports(h)).collect(),
    };
    #[derive(Serialize)]
    struct Banner<'a> {
        checkpoint: &'a Path,
        scene: &'a Path,
        heads: Vec<&'static str>,
        subset: String,
        batch: usize,
        latency_reps: usize,
    }
    print!(
        "{}",
        banner(
            "eval",
            &Banner {
                checkpoint: &a.checkpoint,
                scene: &a.scene,
                heads: heads.iter().map(|h| h.name()).collect(),
                subset: format!("{:?}", a.subset).to_lowercase(),
                batch: a.batch,
                latency_reps: a.latency_reps,
            }
        )
    );

    let (split_cfg, patch) = checkpoint_split(&ckpt)?;
    let set = match a.subset {
        Subset::All => extract_patches(&cube, &scene.labels, patch)?,
        s => {
            let splits = make_splits(&cube, &scene.labels, patch, &split_cfg)?;
            match s {
                Subset::Train => splits.train,
                Subset::Val => splits.val,
                _ => splits.test,
            }
        }
    };
    if set.is_empty() {
        bail!("the {:?} subset is empty", a.subset);
    }
    let cms = optim::evaluate_many(model, &set, &heads, a.batch)?;
    let scores = heads
        .iter()
        .zip(cms)
        .map(|(&h, cm)| Ok((h, Some(Scores::of(&cm)?))))
        .collect::<Result<Vec<_>>>()?;
    let latency = if a.latency_reps > 0 {
        let n = a.batch.min(set.len());
        let idx: Vec<usize> = (0..n).collect();
        let batch = set.gather(&idx);
        let mut l = Vec::new();
        for &h in &heads {
            l.push(measure_inference(model, h, &batch, a.latency_reps, 2)?.median_us);
        }
        Some(l)
    } else {
        None
    };
    let table = score_table(model, &scores, latency.as_deref());
    print!("{}", table.render());
    if let Some(p) = &a.tsv {
        std::fs::write(p, table.to_tsv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn palette_for(classes: usize) -> Vec<Rgb> {
    let mut p = default_palette();
    // Beyond the built-in colours, spread extra ones deterministically.
    for k in p.len()..=classes {
        p.push([(k * 97 % 256) as u8, (k * 57 % 256) as u8, (k * 151 % 256) as u8]);
    }
    p
}

pub fn map(a: &MapArgs) -> Result<()> {
    let scene = pipeline::load_scene(&a.scene)?;
    let (ckpt, cube) = load_for_scene(&a.checkpoint, &scene)?;
    let model = &ckpt.model;
    #[derive(Serialize)]
    struct Banner<'a> {
        checkpoint: &'a Path,
        scene: &'a Path,
        out: &'a Path,
        batch: usize,
    }
    print!(
        "{}",
        banner(
            "map",
            &Banner {
                checkpoint: &a.checkpoint,
                scene: &a.scene,
                out: &a.out,
                batch: a.batch,
            }
        )
    );
    let set = extract_patches(&cube, &scene.labels, model.config().patch)?;
    let (h, w) = (scene.header.height, scene.header.width);
    let palette = palette_for(scene.header.num_classes);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let gt: Vec<u16> = scene.labels.labels().to_vec();
    let mut maps: Vec<(&str, Vec<u16>)> = vec![("gt", gt)];
    let heads: Vec<Head> = Head::ALL.into_iter().filter(|&h| model.supports(h)).collect();
    if heads.len() < Head::ALL.len() {
        log::warn!("checkpoint has no student heads; writing the teacher map only");
    }
    let preds = optim::predict_many(model, &set, &heads, a.batch)?;
    for (&head, preds) in heads.iter().zip(preds) {
        let mut m = vec![0u16; h * w];
        for (&(r, c), &p) in set.coords().iter().zip(&preds) {
            m[r * w + c] = p as u16 + 1;
        }
        maps.push((head.name(), m));
    }
    for (name, m) in &maps {
        let path = a.out.join(format!("{name}.ppm"));
        render_map(m, w, h, &palette, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    let refs: Vec<&[u16]> = maps.iter().map(|(_, m)| m.as_slice()).collect();
    let (panel, pw) = side_by_side(&refs, w, h, 2, &palette)?;
    write_ppm(&a.out.join("panel.ppm"), pw, h, &panel)?;
    let names: Vec<&str> = maps.iter().map(|(n, _)| *n).collect();
    println!("wrote {}x{} maps ({}) and panel.ppm to {}", h, w, names.join(", "), a.out.display());
    Ok(())
}
