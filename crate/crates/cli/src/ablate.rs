use anyhow::{Context, Result};
use rayon::prelude::*;
use sdhsi::model::Head;
use sdhsi::preprocess::SplitConfig;
use serde::Serialize;

use crate::args::{banner, AblateArgs, RunConfig, Which};
use crate::commands::train_on;
use crate::pipeline::{self, make_splits, Reduced, Scene};
use crate::table::{pct, Table};

/// One experimental condition.
#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    pub cfg: RunConfig,
}

/// Arms of an ablation; they differ from `base` only in the ablated factor.
pub fn arms(which: Which, base: &RunConfig) -> Vec<Arm> {
    let with = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Arm { name: name.into(), cfg }
    };
    match which {
        Which::Sd => vec![
            with("w SD", &|c| c.flags.no_sd = false),
            with("w/o SD", &|c| c.flags.no_sd = true),
        ],
        Which::Triplet => vec![
            with("with triplet", &|c| c.flags.no_triplet = false),
            with("without triplet", &|c| c.flags.no_triplet = true),
        ],
        Which::Splits => [("C1", [0.3, 0.1, 0.6]), ("C2", [0.2, 0.1, 0.7]), ("C3", [0.1, 0.1, 0.8])]
            .into_iter()
            .map(|(n, s)| with(n, &|c| c.split = s))
            .collect(),
        Which::Patch => [11, 15, 17]
            .into_iter()
            .map(|p| with(&format!("{p}x{p}"), &|c| c.patch = p))
            .collect(),
    }
}

/// Mean test scores of one arm per head, over seeds.
#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub arm: String,
    pub head: String,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn run_arm(arm: &Arm, scene: &Scene, reduced: &Reduced, a: &AblateArgs) -> Result<Vec<ArmResult>> {
    let cfg = &arm.cfg;
    // The split depends only on the base seed, so every arm and repetition sees the same samples.
    let split_cfg = SplitConfig::new(cfg.split[0], cfg.split[1], cfg.split[2], cfg.seed)?;
    let splits = make_splits(&reduced.cube, &scene.labels, cfg.patch, &split_cfg)?;
    let mut sums: Vec<(Head, [f64; 3])> = Vec::new();
    for rep in 0..a.seeds {
        let seed = cfg.seed + rep as u64;
        let label = format!("[{} seed {seed}] ", arm.name);
        let run = train_on(cfg, &splits, reduced.pca.bands_out, scene.header.num_classes, seed, &label)
            .with_context(|| format!("arm {:?}, seed {seed}", arm.name))?;
        if let Some(out) = &a.out {
            let dir = out.join(slug(&arm.name)).join(format!("seed{seed}"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            run.log.write_jsonl(&dir.join("train_log.jsonl"))?;
        }
        for (h, s) in run.scores {
            let Some(s) = s else { continue };
            match sums.iter_mut().find(|(k, _)| *k == h) {
                Some((_, acc)) => {
                    acc[0] += s.oa;
                    acc[1] += s.aa;
                    acc[2] += s.kappa;
                }
                None => sums.push((h, [s.oa, s.aa, s.kappa])),
            }
        }
    }
    let n = a.seeds as f64;
    Ok(sums
        .into_iter()
        .map(|(h, [oa, aa, k])| ArmResult {
            arm: arm.name.clone(),
            head: h.to_string(),
            oa: oa / n,
            aa: aa / n,
            kappa: k / n,
        })
        .collect())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    anyhow::ensure!(a.seeds >= 1, "--seeds must be at least 1");
    let base = RunConfig::from_args(&a.run)?;
    #[derive(Serialize)]
    struct Banner<'a> {
        which: Which,
        seeds: usize,
        parallel_arms: bool,
        run: &'a RunConfig,
    }
    print!(
        "{}",
        banner(
            "ablate",
            &Banner {
                which: a.which,
                seeds: a.seeds,
                parallel_arms: a.parallel_arms,
                run: &base,
            }
        )
    );
    let scene = pipeline::load_scene(&base.scene)?;
    let reduced = pipeline::reduce(&scene, base.pca)?;
    let arms = arms(a.which, &base);
    let results: Vec<Vec<ArmResult>> = if a.parallel_arms {
        arms.par_iter().map(|arm| run_arm(arm, &scene, &reduced, a)).collect::<Result<_>>()?
    } else {
        arms.iter().map(|arm| run_arm(arm, &scene, &reduced, a)).collect::<Result<_>>()?
    };

    let table = result_table(&results);
    print!("{}", table.render());
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("ablation.tsv"), table.to_tsv())?;
    }
    if let Some(p) = &a.tsv {
        std::fs::write(p, table.to_tsv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Rows per (head, arm) with OA/AA deltas against the first arm.
pub fn result_table(results: &[Vec<ArmResult>]) -> Table {
    let mut t = Table::new(["head", "arm", "OA", "AA", "kappa", "dOA", "dAA"]);
    for head in Head::ALL {
        let name = head.to_string();
        let rows: Vec<&ArmResult> = results.iter().filter_map(|r| r.iter().find(|x| x.head == name)).collect();
        let Some(first) = rows.first() else { continue };
        for r in &rows {
            t.row([
                name.clone(),
                r.arm.clone(),
                pct(r.oa),
                pct(r.aa),
                format!("{:.4}", r.kappa),
                format!("{:+.2}", 100.0 * (r.oa - first.oa)),
                format!("{:+.2}", 100.0 * (r.aa - first.aa)),
            ]);
        }
    }
    t
}
