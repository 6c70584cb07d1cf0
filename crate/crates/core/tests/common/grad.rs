use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdhsi::layers::{self, BatchNormStats, DropBlockConfig, Mode};
use sdhsi::losses;
use sdhsi::tensor::NormStats;
use sdhsi::{Graph, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Relative tolerance between analytic and numeric gradients.
pub const TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared against it instead.
pub const FLOOR: f64 = 1e-3;

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> sdhsi::Result<Var>>;

/// Inputs (all differentiated) and the expression under test.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

impl Case {
    fn new(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> sdhsi::Result<Var> + 'static) -> Self {
        Self {
            inputs,
            build: Box::new(build),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Stats {
    pub cases: usize,
    pub entries: usize,
    pub worst: f64,
}

impl Stats {
    pub fn merge(&mut self, other: Stats) {
        self.cases += other.cases;
        self.entries += other.entries;
        self.worst = self.worst.max(other.worst);
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Fixed random projection that turns any output into the scalar `Σ y·r`.
fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> sdhsi::Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Compares autodiff against central differences for every input entry.
pub fn check(label: &str, case: &Case, seed: u64) -> Result<Stats, String> {
    let fail = |e: sdhsi::Error| format!("{label}: {e}");
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = (case.build)(&mut g, &vars).map_err(fail)?;
    let r = projection(g.shape(y), seed);
    let loss = project(&mut g, y, &r).map_err(fail)?;
    g.backward(loss).map_err(fail)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, String> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = (case.build)(&mut g, &vars).map_err(fail)?;
        let l = project(&mut g, y, &r).map_err(fail)?;
        Ok(g.data(l)[0])
    };

    let mut stats = Stats {
        cases: 1,
        ..Stats::default()
    };
    let mut inputs = case.inputs.clone();
    for (i, grad) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let x0 = inputs[i].data()[k];
            inputs[i].data_mut()[k] = x0 + STEP;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[k] = x0 - STEP;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[k] = x0;
            let n = (up - down) / (2.0 * STEP);
            let err = rel_err(a, n);
            if !(err <= TOL) {
                return Err(format!(
                    "{label}: input {i} {:?} entry {k}: analytic {a:.10e} vs numeric {n:.10e} (rel err {err:.2e})",
                    case.inputs[i].shape()
                ));
            }
            stats.entries += 1;
            stats.worst = stats.worst.max(err);
        }
    }
    Ok(stats)
}

pub fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn shape(rng: &mut ChaCha8Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| dim(rng, lo, hi)).collect()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.2, 1)`, away from the kink of relu.
pub fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Pairwise distinct values at least 0.08 apart, so max selection is stable.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order.iter().map(|&i| i as f64 * 0.1 - 1.0 + rng.random_range(0.0..0.02)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn any_rank(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = dim(rng, 1, 4);
    shape(rng, rank, 1, 4)
}

fn axes_subset(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    loop {
        let axes: Vec<usize> = (0..rank).filter(|_| rng.random::<bool>()).collect();
        if !axes.is_empty() {
            return axes;
        }
    }
}

/// Kernel side, padding and stride for which the stride tiles the padded extent.
fn conv_axis(rng: &mut ChaCha8Rng, extent: usize) -> (usize, usize, usize) {
    let k = dim(rng, 1, 3);
    let pad = dim(rng, 0, k / 2);
    let k = k.min(extent + 2 * pad);
    let stride = if (extent + 2 * pad - k).is_multiple_of(2) { dim(rng, 1, 2) } else { 1 };
    (k, pad, stride)
}

type Gen = fn(&mut ChaCha8Rng) -> Case;

/// Every differentiable graph operation and layer, with a random-shape generator.
pub fn op_cases() -> Vec<(&'static str, Gen)> {
    vec![
        ("add", |rng| {
            let s = any_rank(rng);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng), uniform(&s, -1.0, 1.0, rng)], |g, v| g.add(v[0], v[1]))
        }),
        ("sub", |rng| {
            let s = any_rank(rng);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng), uniform(&s, -1.0, 1.0, rng)], |g, v| g.sub(v[0], v[1]))
        }),
        ("mul", |rng| {
            let s = any_rank(rng);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng), uniform(&s, -1.0, 1.0, rng)], |g, v| g.mul(v[0], v[1]))
        }),
        ("add_scalar", |rng| {
            let s = any_rank(rng);
            let c = rng.random_range(-2.0..2.0);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| Ok(g.add_scalar(v[0], c)))
        }),
        ("mul_scalar", |rng| {
            let s = any_rank(rng);
            let c = rng.random_range(-2.0..2.0);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| Ok(g.mul_scalar(v[0], c)))
        }),
        ("relu", |rng| {
            let s = any_rank(rng);
            Case::new(vec![off_zero(&s, rng)], |g, v| Ok(g.relu(v[0])))
        }),
        ("exp", |rng| {
            let s = any_rank(rng);
            Case::new(vec![uniform(&s, -2.0, 2.0, rng)], |g, v| Ok(g.exp(v[0])))
        }),
        ("log", |rng| {
            let s = any_rank(rng);
            Case::new(vec![uniform(&s, 0.5, 2.0, rng)], |g, v| g.log(v[0]))
        }),
        ("sqrt", |rng| {
            let s = any_rank(rng);
            Case::new(vec![uniform(&s, 0.5, 2.0, rng)], |g, v| g.sqrt(v[0]))
        }),
        ("reshape", |rng| {
            let s = shape(rng, 3, 1, 4);
            let to = vec![s[0] * s[1], s[2]];
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| {
                let y = g.reshape(v[0], &to)?;
                let y = g.mul(y, y)?;
                g.reshape(y, &[to[0] * to[1]])
            })
        }),
        ("permute", |rng| {
            let rank = dim(rng, 2, 4);
            let s = shape(rng, rank, 1, 4);
            let mut perm: Vec<usize> = (0..rank).collect();
            perm.shuffle(rng);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| {
                let y = g.permute(v[0], &perm)?;
                g.mul(y, y)
            })
        }),
        ("sum_axes", |rng| {
            let s = any_rank(rng);
            let axes = axes_subset(rng, s.len());
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| g.sum_axes(v[0], &axes))
        }),
        ("sum", |rng| {
            let s = any_rank(rng);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            })
        }),
        ("mean_axes", |rng| {
            let s = any_rank(rng);
            let axes = axes_subset(rng, s.len());
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| g.mean_axes(v[0], &axes))
        }),
        ("mean", |rng| {
            let s = any_rank(rng);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], |g, v| {
                let y = g.exp(v[0]);
                Ok(g.mean(y))
            })
        }),
        ("max_axes", |rng| {
            let s = any_rank(rng);
            let axes = axes_subset(rng, s.len());
            Case::new(vec![distinct(&s, rng)], move |g, v| g.max_axes(v[0], &axes))
        }),
        ("softmax", |rng| {
            let s = any_rank(rng);
            let axis = dim(rng, 0, s.len() - 1);
            Case::new(vec![uniform(&s, -2.0, 2.0, rng)], move |g, v| g.softmax(v[0], axis))
        }),
        ("matmul", |rng| {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            Case::new(vec![uniform(&[m, k], -1.0, 1.0, rng), uniform(&[k, n], -1.0, 1.0, rng)], |g, v| g.matmul(v[0], v[1]))
        }),
        ("bmm", |rng| {
            let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            Case::new(vec![uniform(&[b, m, k], -1.0, 1.0, rng), uniform(&[b, k, n], -1.0, 1.0, rng)], |g, v| g.bmm(v[0], v[1], false))
        }),
        ("bmm_transposed", |rng| {
            let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            Case::new(vec![uniform(&[b, m, k], -1.0, 1.0, rng), uniform(&[b, n, k], -1.0, 1.0, rng)], |g, v| g.bmm(v[0], v[1], true))
        }),
        ("bias_add", |rng| {
            let s = any_rank(rng);
            let axis = dim(rng, 0, s.len() - 1);
            let b = uniform(&[s[axis]], -1.0, 1.0, rng);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng), b], move |g, v| g.bias_add(v[0], v[1], axis))
        }),
        ("conv3d", |rng| {
            let (n, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let ext = shape(rng, 3, 2, 5);
            let axes: Vec<(usize, usize, usize)> = ext.iter().map(|&e| conv_axis(rng, e)).collect();
            let pad = [axes[0].1, axes[1].1, axes[2].1];
            let stride = [axes[0].2, axes[1].2, axes[2].2];
            let x = uniform(&[n, cin, ext[0], ext[1], ext[2]], -1.0, 1.0, rng);
            let w = uniform(&[cout, cin, axes[0].0, axes[1].0, axes[2].0], -1.0, 1.0, rng);
            let b = uniform(&[cout], -1.0, 1.0, rng);
            Case::new(vec![x, w, b], move |g, v| g.conv3d(v[0], v[1], v[2], pad, stride))
        }),
        ("conv2d", |rng| {
            let (n, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let ext = shape(rng, 2, 2, 6);
            let axes: Vec<(usize, usize, usize)> = ext.iter().map(|&e| conv_axis(rng, e)).collect();
            let pad = [axes[0].1, axes[1].1];
            let stride = [axes[0].2, axes[1].2];
            let x = uniform(&[n, cin, ext[0], ext[1]], -1.0, 1.0, rng);
            let w = uniform(&[cout, cin, axes[0].0, axes[1].0], -1.0, 1.0, rng);
            let b = uniform(&[cout], -1.0, 1.0, rng);
            Case::new(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], v[2], pad, stride))
        }),
        ("batch_norm_batch_stats", |rng| {
            let (n, c) = (dim(rng, 2, 4), dim(rng, 1, 3));
            let mut s = vec![n, c];
            let extra = dim(rng, 0, 2);
            s.extend(shape(rng, extra, 1, 3));
            let (gm, bt) = (uniform(&[c], 0.5, 1.5, rng), uniform(&[c], -0.5, 0.5, rng));
            Case::new(vec![uniform(&s, -1.0, 1.0, rng), gm, bt], |g, v| {
                Ok(g.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?.output)
            })
        }),
        ("batch_norm_running_stats", |rng| {
            let (n, c) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let mut s = vec![n, c];
            let extra = dim(rng, 0, 2);
            s.extend(shape(rng, extra, 1, 3));
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            let (gm, bt) = (uniform(&[c], 0.5, 1.5, rng), uniform(&[c], -0.5, 0.5, rng));
            Case::new(vec![uniform(&s, -1.0, 1.0, rng), gm, bt], move |g, v| {
                let stats = NormStats::Running { mean: &mean, var: &var };
                Ok(g.batch_norm(v[0], v[1], v[2], stats, 1e-5)?.output)
            })
        }),
        ("mask", |rng| {
            let s = any_rank(rng);
            let n: usize = s.iter().product();
            let m: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.5 } else { 0.0 }).collect();
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| g.mask(v[0], m.clone()))
        }),
        ("adaptive_avg_pool2d", |rng| {
            let s = vec![dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 7), dim(rng, 1, 7)];
            let (oh, ow) = (dim(rng, 1, s[2]), dim(rng, 1, s[3]));
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| g.adaptive_avg_pool2d(v[0], oh, ow))
        }),
        ("index_select", |rng| {
            let s = vec![dim(rng, 1, 5), dim(rng, 1, 4)];
            let idx: Vec<usize> = (0..dim(rng, 1, 8)).map(|_| rng.random_range(0..s[0])).collect();
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| g.index_select(v[0], &idx))
        }),
        ("normalize_rows", |rng| {
            let s = vec![dim(rng, 1, 5), dim(rng, 1, 6)];
            Case::new(vec![off_zero(&s, rng)], |g, v| g.normalize_rows(v[0], layers::NORM_EPS))
        }),
        ("cross_entropy", |rng| {
            let (n, k) = (dim(rng, 1, 6), dim(rng, 2, 6));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            Case::new(vec![uniform(&[n, k], -3.0, 3.0, rng)], move |g, v| g.cross_entropy(v[0], &labels))
        }),
        ("dense", |rng| {
            let (n, din, dout) = (dim(rng, 1, 5), dim(rng, 1, 6), dim(rng, 1, 6));
            let x = uniform(&[n, din], -1.0, 1.0, rng);
            let w = uniform(&[din, dout], -1.0, 1.0, rng);
            let b = uniform(&[dout], -1.0, 1.0, rng);
            Case::new(vec![x, w, b], |g, v| layers::dense(g, v[0], v[1], v[2]))
        }),
        ("dropout", |rng| {
            let s = any_rank(rng);
            let p = rng.random_range(0.1..0.6);
            let seed = rng.random::<u64>();
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| {
                layers::dropout(g, v[0], p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))
            })
        }),
        ("dropblock", |rng| {
            let s = vec![dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 3, 7), dim(rng, 3, 7)];
            let cfg = DropBlockConfig {
                block_size: if rng.random::<bool>() { 3 } else { 1 },
                drop_prob: rng.random_range(0.1..0.5),
            };
            let seed = rng.random::<u64>();
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], move |g, v| {
                layers::dropblock(g, v[0], &cfg, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))
            })
        }),
        ("batchnorm_layer", |rng| {
            let (n, c) = (dim(rng, 2, 4), dim(rng, 1, 3));
            let s = vec![n, c, dim(rng, 1, 3), dim(rng, 1, 3)];
            let mode = if rng.random::<bool>() { Mode::Train } else { Mode::Eval };
            let stats = BatchNormStats {
                mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
                var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            };
            let (gm, bt) = (uniform(&[c], 0.5, 1.5, rng), uniform(&[c], -0.5, 0.5, rng));
            Case::new(vec![uniform(&s, -1.0, 1.0, rng), gm, bt], move |g, v| {
                Ok(layers::batchnorm(g, v[0], v[1], v[2], &stats, mode)?.0)
            })
        }),
        ("global_avg_pool", |rng| {
            let rank = dim(rng, 2, 5);
            let s = shape(rng, rank, 1, 4);
            Case::new(vec![uniform(&s, -1.0, 1.0, rng)], |g, v| layers::global_avg_pool(g, v[0]))
        }),
        ("self_attention", |rng| {
            let (n, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 3));
            let mut inputs = vec![uniform(&[n, c, h, w], -1.0, 1.0, rng)];
            for _ in 0..3 {
                inputs.push(uniform(&[c, c], -0.8, 0.8, rng));
            }
            Case::new(inputs, |g, v| layers::self_attention(g, v[0], v[1], v[2], v[3]))
        }),
        ("logit_distillation", |rng| {
            let (n, k) = (dim(rng, 1, 6), dim(rng, 2, 6));
            let teacher = uniform(&[n, k], -2.0, 2.0, rng);
            Case::new(vec![uniform(&[n, k], -2.0, 2.0, rng)], move |g, v| {
                let t = g.constant(teacher.clone());
                losses::logit_distillation(g, t, v[0])
            })
        }),
        ("hint_loss", |rng| {
            let (n, d) = (dim(rng, 1, 6), dim(rng, 1, 6));
            let teacher = off_zero(&[n, d], rng);
            Case::new(vec![off_zero(&[n, d], rng)], move |g, v| {
                let t = g.constant(teacher.clone());
                losses::hint_loss(g, t, v[0])
            })
        }),
        ("triplet_loss", |rng| {
            let (n, d) = (dim(rng, 3, 8), dim(rng, 1, 4));
            let labels: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.random_range(0..3) }).collect();
            let e = uniform(&[n, d], -1.0, 1.0, rng);
            let triples = losses::mine_triplets(e.data(), d, &labels);
            let margin = rng.random_range(0.5..2.0);
            Case::new(vec![e], move |g, v| losses::triplet_loss(g, v[0], &triples, margin))
        }),
    ]
}
