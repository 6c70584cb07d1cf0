//! Eager tape: every op computes its value immediately and records how to
//! push gradients back to its inputs. `backward` replays the tape in reverse.

use super::conv::{self, ConvGeometry};
use super::gemm::{gemm, MatRef};
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    Sum { input: Var, axes: Vec<usize> },
    Mean { input: Var, axes: Vec<usize>, count: usize },
    Max { input: Var, argmax: Vec<usize> },
    Softmax { input: Var, axis: usize },
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    BiasAdd { input: Var, bias: Var, axis: usize },
    Conv { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Mask { input: Var, mask: Vec<T> },
    AdaptiveAvgPool2d { input: Var },
    IndexSelect { input: Var, indices: Vec<usize> },
    NormalizeRows { input: Var, norms: Vec<T>, eps: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Statistics used by [`Graph::batch_norm`].
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally tracked running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

pub struct BatchNormOutput<T> {
    pub output: Var,
    /// Per-channel batch mean, present when normalizing with batch statistics.
    pub batch_mean: Option<Vec<T>>,
    /// Per-channel unbiased batch variance, present with batch statistics.
    pub batch_var: Option<Vec<T>>,
}

/// Tape of executed operations. Inputs always precede the nodes that use them.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(input_index, output_index)` for every element of `shape`, where the
/// output index addresses the tensor with `axes` removed.
fn for_each_reduced(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut ostride = vec![0; shape.len()];
    for (k, &a) in kept.iter().enumerate() {
        ostride[a] = out_strides[k];
    }
    let mut idx = vec![0usize; shape.len()];
    let mut out = 0usize;
    for i in 0..numel(shape) {
        f(i, out);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            out += ostride[a];
            if idx[a] < shape[a] {
                break;
            }
            out -= ostride[a] * shape[a];
            idx[a] = 0;
        }
    }
}

/// (outer, len, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn pool_bin(i: usize, out: usize, size: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf)
    }

    /// Copy of `v` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let mut t = self.nodes[v.0].value.clone();
        t.zero_grad();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let value = Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        };
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push_op(self.shape(a).to_vec(), data, &[a, b], rec))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.push_op(self.shape(a).to_vec(), data, &[a], rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        self.map(a, |x| x * s, Op::MulScalar(a, s))
    }

    /// `max(x, 0)`; NaN passes through so that divergence stays visible.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x < T::zero() { T::zero() } else { x }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {:?}", bad),
            });
        }
        Ok(self.map(a, |x| x.ln(), Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {:?}", bad),
            });
        }
        Ok(self.map(a, |x| x.sqrt(), Op::Sqrt(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push_op(shape.to_vec(), data, &[a], Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(a), &shape, perm);
        Ok(self.push_op(out_shape, data, &[a], Op::Permute { input: a, perm: perm.to_vec() }))
    }

    fn check_axes(&self, op: &'static str, a: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let rank = self.shape(a).len();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&x| x >= rank) {
            return Err(Error::shape(op, self.shape(a), &axes));
        }
        Ok(axes)
    }

    fn reduced_shape(&self, a: Var, axes: &[usize]) -> Vec<usize> {
        self.shape(a)
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect()
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = self.check_axes("sum", a, axes)?;
        let out_shape = self.reduced_shape(a, &axes);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let x = self.data(a);
        for_each_reduced(self.shape(a), &axes, |i, o| out[o] += x[i]);
        Ok(self.push_op(out_shape, out, &[a], Op::Sum { input: a, axes }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes).expect("all axes are valid")
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = self.check_axes("mean", a, axes)?;
        let count: usize = axes.iter().map(|&x| self.shape(a)[x]).product();
        let out_shape = self.reduced_shape(a, &axes);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let x = self.data(a);
        for_each_reduced(self.shape(a), &axes, |i, o| out[o] += x[i]);
        let inv = T::one() / T::of(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push_op(out_shape, out, &[a], Op::Mean { input: a, axes, count }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean_axes(a, &axes).expect("all axes are valid")
    }

    /// Maximum over `axes`; the gradient goes to the first maximal element.
    pub fn max_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = self.check_axes("max", a, axes)?;
        let out_shape = self.reduced_shape(a, &axes);
        let mut out = vec![T::neg_infinity(); numel(&out_shape)];
        let mut argmax = vec![usize::MAX; out.len()];
        let x = self.data(a);
        for_each_reduced(self.shape(a), &axes, |i, o| {
            if argmax[o] == usize::MAX || x[i] > out[o] {
                out[o] = x[i];
                argmax[o] = i;
            }
        });
        Ok(self.push_op(out_shape, out, &[a], Op::Max { input: a, argmax }))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.data(a);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (x[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[at(k)] = y[at(k)] / z;
                }
            }
        }
        Ok(self.push_op(shape, y, &[a], Op::Softmax { input: a, axis }))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::rm(self.data(a), m, k),
            MatRef::rm(self.data(b), k, n),
            T::zero(),
            &mut c,
        );
        Ok(self.push_op(vec![m, n], c, &[a, b], Op::MatMul(a, b)))
    }

    /// Batched product `[B×m×k] · [B×k×n]`, or `[B×m×k] · [B×n×k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if !ok || k != kb {
            return Err(Error::shape("bmm", sa, sb));
        }
        let mut c = vec![T::zero(); bsz * m * n];
        let (xa, xb) = (self.data(a), self.data(b));
        for i in 0..bsz {
            let ai = &xa[i * m * k..(i + 1) * m * k];
            let bi = &xb[i * k * n..(i + 1) * k * n];
            let bref = if trans_b { MatRef::rm_t(bi, k, n) } else { MatRef::rm(bi, k, n) };
            gemm(T::one(), MatRef::rm(ai, m, k), bref, T::zero(), &mut c[i * m * n..(i + 1) * m * n]);
        }
        Ok(self.push_op(vec![bsz, m, n], c, &[a, b], Op::BatchMatMul { a, b, trans_b }))
    }

    /// Adds a vector along `axis` of `a` (bias broadcasting).
    pub fn bias_add(&mut self, a: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(Error::shape("bias_add", &shape, self.shape(bias)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let (x, b) = (self.data(a), self.data(bias));
        let mut y = x.to_vec();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                y[base..base + inner].iter_mut().for_each(|v| *v += b[k]);
            }
        }
        Ok(self.push_op(shape, y, &[a, bias], Op::BiasAdd { input: a, bias, axis }))
    }

    /// 3D cross-correlation of `N×Cin×D×H×W` with `Cout×Cin×kD×kH×kW`, plus bias.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var, pad: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(weight), pad, stride)?;
        self.conv(x, weight, bias, geom, None)
    }

    /// 2D cross-correlation of `N×Cin×H×W` with `Cout×Cin×kH×kW`, plus bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, pad: [usize; 2], stride: [usize; 2]) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let geom = ConvGeometry::new(
            &[sx[0], sx[1], 1, sx[2], sx[3]],
            &[sw[0], sw[1], 1, sw[2], sw[3]],
            [0, pad[0], pad[1]],
            [1, stride[0], stride[1]],
        )
        .map_err(|_| Error::shape("conv2d", sx, sw))?;
        let out = vec![geom.batch, geom.out_channels, geom.output[1], geom.output[2]];
        self.conv(x, weight, bias, geom, Some(out))
    }

    fn conv(&mut self, x: Var, weight: Var, bias: Var, geom: ConvGeometry, shape: Option<Vec<usize>>) -> Result<Var> {
        if self.shape(bias) != [geom.out_channels] {
            return Err(Error::shape("conv bias", self.shape(bias), &[geom.out_channels]));
        }
        let y = conv::forward(&geom, self.data(x), self.data(weight), self.data(bias));
        let shape = shape.unwrap_or_else(|| geom.output_shape());
        Ok(self.push_op(shape, y, &[x, weight, bias], Op::Conv { input: x, weight, bias, geom }))
    }

    /// Per-channel normalization of `N×C×…` followed by `gamma·x̂ + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_, T>, eps: f64) -> Result<BatchNormOutput<T>> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", &shape, &[]));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm affine", &shape, self.shape(gamma)));
        }
        let (n, inner) = (shape[0], numel(&shape[2..]));
        let count = n * inner;
        let xs = self.data(x);
        let eps = T::of(eps);
        let channel_iter = |ch: usize| (0..n).flat_map(move |b| (0..inner).map(move |i| (b * c + ch) * inner + i));

        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(Error::contract("batch_norm in train mode needs at least 2 samples"));
                }
                let cnt = T::of(count as f64);
                let mean: Vec<T> = (0..c).map(|ch| channel_iter(ch).map(|i| xs[i]).sum::<T>() / cnt).collect();
                let var: Vec<T> = (0..c)
                    .map(|ch| channel_iter(ch).map(|i| (xs[i] - mean[ch]) * (xs[i] - mean[ch])).sum::<T>() / cnt)
                    .collect();
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &[c], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for ch in 0..c {
            for i in channel_iter(ch) {
                let h = (xs[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = g[ch] * h + b[ch];
            }
        }
        let (batch_mean, batch_var) = if batch_stats {
            let corr = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
            (Some(mean), Some(var.iter().map(|&v| v * corr).collect()))
        } else {
            (None, None)
        };
        let output = self.push_op(
            shape,
            y,
            &[x, gamma, beta],
            Op::BatchNorm { input: x, gamma, beta, xhat, inv_std, batch_stats },
        );
        Ok(BatchNormOutput { output, batch_mean, batch_var })
    }

    /// Elementwise product with a constant mask (dropout-style layers).
    pub fn mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape("mask", self.shape(a), &[mask.len()]));
        }
        let y = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(self.push_op(self.shape(a).to_vec(), y, &[a], Op::Mask { input: a, mask }))
    }

    /// Average pooling of `N×C×H×W` onto a fixed `out_h×out_w` grid.
    pub fn adaptive_avg_pool2d(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || out_h > s[2] || out_w > s[3] {
            return Err(Error::shape("adaptive_avg_pool2d", &s, &[out_h, out_w]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = self.data(a);
        let mut y = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, out_w, w);
                    let mut acc = T::zero();
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += x[(p * h + iy) * w + ix];
                        }
                    }
                    y[(p * out_h + oy) * out_w + ox] = acc / T::of(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(self.push_op(vec![s[0], s[1], out_h, out_w], y, &[a], Op::AdaptiveAvgPool2d { input: a }))
    }

    /// Gathers rows (axis 0) of `a` by index.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("index_select", &s, indices));
        }
        let row = numel(&s[1..]);
        let x = self.data(a);
        let mut y = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            y.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        Ok(self.push_op(shape, y, &[a], Op::IndexSelect { input: a, indices: indices.to_vec() }))
    }

    /// Row-wise `x / max(‖x‖₂, eps)` of an `N×d` matrix.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("normalize_rows", &s, &[]));
        }
        let eps = T::of(eps);
        let x = self.data(a);
        let norms: Vec<T> = x.chunks(s[1]).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let y = x
            .chunks(s[1])
            .zip(&norms)
            .flat_map(|(r, &n)| {
                let d = n.max(eps);
                r.iter().map(move |&v| v / d)
            })
            .collect();
        Ok(self.push_op(s, y, &[a], Op::NormalizeRows { input: a, norms, eps }))
    }

    /// Mean over rows of `−log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.data(logits);
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * k + j] = e;
                sum += e;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p = *p / sum);
            total += m + sum.ln() - row[label];
        }
        let loss = total / T::of(labels.len() as f64);
        Ok(self.push_op(Vec::new(), vec![loss], &[logits], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&gy);
            } else {
                self.propagate(i, &gy, &mut grads);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Gradient buffer of `v`, or None when `v` does not need one.
        macro_rules! with_slot {
            ($v:expr, |$g:ident| $body:expr) => {
                if nodes[$v.0].value.requires_grad() {
                    let len = nodes[$v.0].value.numel();
                    let $g: &mut Vec<T> = grads[$v.0].get_or_insert_with(|| vec![T::zero(); len]);
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_slot!(*a, |g| add_into(g, gy));
                with_slot!(*b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |g| add_into(g, gy));
                with_slot!(*b, |g| g.iter_mut().zip(gy).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                with_slot!(*a, |g| for k in 0..g.len() {
                    g[k] += gy[k] * xb[k];
                });
                with_slot!(*b, |g| for k in 0..g.len() {
                    g[k] += gy[k] * xa[k];
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => with_slot!(*a, |g| add_into(g, gy)),
            Op::MulScalar(a, s) => with_slot!(*a, |g| g.iter_mut().zip(gy).for_each(|(d, &v)| *d += v * *s)),
            Op::Relu(a) => {
                let x = val(*a);
                with_slot!(*a, |g| for k in 0..g.len() {
                    if x[k] > T::zero() {
                        g[k] += gy[k];
                    }
                });
            }
            Op::Exp(a) => with_slot!(*a, |g| for k in 0..g.len() {
                g[k] += gy[k] * out[k];
            }),
            Op::Log(a) => {
                let x = val(*a);
                with_slot!(*a, |g| for k in 0..g.len() {
                    g[k] += gy[k] / x[k];
                });
            }
            Op::Sqrt(a) => with_slot!(*a, |g| {
                let half = T::of(0.5);
                for k in 0..g.len() {
                    g[k] += gy[k] * half / out[k];
                }
            }),
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(gy, nodes[i].value.shape(), &inverse);
                with_slot!(*input, |g| add_into(g, &back));
            }
            Op::Sum { input, axes } => with_slot!(*input, |g| {
                for_each_reduced(shape(*input), axes, |k, o| g[k] += gy[o]);
            }),
            Op::Mean { input, axes, count } => with_slot!(*input, |g| {
                let inv = T::one() / T::of(*count as f64);
                for_each_reduced(shape(*input), axes, |k, o| g[k] += gy[o] * inv);
            }),
            Op::Max { input, argmax } => with_slot!(*input, |g| {
                for (o, &k) in argmax.iter().enumerate() {
                    g[k] += gy[o];
                }
            }),
            Op::Softmax { input, axis } => with_slot!(*input, |g| {
                let (outer, len, inner) = split_axis(nodes[i].value.shape(), *axis);
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + j;
                        let dot = (0..len).map(|k| gy[at(k)] * out[at(k)]).sum::<T>();
                        for k in 0..len {
                            g[at(k)] += out[at(k)] * (gy[at(k)] - dot);
                        }
                    }
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                let (xa, xb) = (val(*a), val(*b));
                with_slot!(*a, |g| gemm(T::one(), MatRef::rm(gy, m, n), MatRef::rm_t(xb, n, k), T::one(), g));
                with_slot!(*b, |g| gemm(T::one(), MatRef::rm_t(xa, k, m), MatRef::rm(gy, m, n), T::one(), g));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (bsz, m, k) = (shape(*a)[0], shape(*a)[1], shape(*a)[2]);
                let n = nodes[i].value.shape()[2];
                let (xa, xb) = (val(*a), val(*b));
                with_slot!(*a, |g| for t in 0..bsz {
                    let gi = &gy[t * m * n..(t + 1) * m * n];
                    let bi = &xb[t * k * n..(t + 1) * k * n];
                    let bref = if *trans_b { MatRef::rm(bi, n, k) } else { MatRef::rm_t(bi, n, k) };
                    gemm(T::one(), MatRef::rm(gi, m, n), bref, T::one(), &mut g[t * m * k..(t + 1) * m * k]);
                });
                with_slot!(*b, |g| for t in 0..bsz {
                    let gi = &gy[t * m * n..(t + 1) * m * n];
                    let ai = &xa[t * m * k..(t + 1) * m * k];
                    let dst = &mut g[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        gemm(T::one(), MatRef::rm_t(gi, n, m), MatRef::rm(ai, m, k), T::one(), dst);
                    } else {
                        gemm(T::one(), MatRef::rm_t(ai, k, m), MatRef::rm(gi, m, n), T::one(), dst);
                    }
                });
            }
            Op::BiasAdd { input, bias, axis } => {
                with_slot!(*input, |g| add_into(g, gy));
                with_slot!(*bias, |g| {
                    let (outer, len, inner) = split_axis(nodes[i].value.shape(), *axis);
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            g[k] += gy[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::Conv { input, weight, bias, geom } => {
                let need = [
                    nodes[input.0].value.requires_grad(),
                    nodes[weight.0].value.requires_grad(),
                    nodes[bias.0].value.requires_grad(),
                ];
                let grads_out = conv::backward(geom, val(*input), val(*weight), gy, need);
                if let Some(dx) = grads_out.input {
                    with_slot!(*input, |g| add_into(g, &dx));
                }
                if let Some(dw) = grads_out.weight {
                    with_slot!(*weight, |g| add_into(g, &dw));
                }
                if let Some(db) = grads_out.bias {
                    with_slot!(*bias, |g| add_into(g, &db));
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = shape(*input);
                let (n, c, inner) = (s[0], s[1], numel(&s[2..]));
                let gam = val(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for k in base..base + inner {
                            sum_dy[ch] += gy[k];
                            sum_dy_xhat[ch] += gy[k] * xhat[k];
                        }
                    }
                }
                with_slot!(*input, |g| {
                    let m = T::of((n * inner) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let scale = gam[ch] * inv_std[ch];
                            for k in base..base + inner {
                                g[k] += if *batch_stats {
                                    scale / m * (m * gy[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch])
                                } else {
                                    scale * gy[k]
                                };
                            }
                        }
                    }
                });
                with_slot!(*gamma, |g| add_into(g, &sum_dy_xhat));
                with_slot!(*beta, |g| add_into(g, &sum_dy));
            }
            Op::Mask { input, mask } => with_slot!(*input, |g| for k in 0..g.len() {
                g[k] += gy[k] * mask[k];
            }),
            Op::AdaptiveAvgPool2d { input } => with_slot!(*input, |g| {
                let s = shape(*input);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let os = nodes[i].value.shape();
                let (out_h, out_w) = (os[2], os[3]);
                for p in 0..planes {
                    for oy in 0..out_h {
                        let (y0, y1) = pool_bin(oy, out_h, h);
                        for ox in 0..out_w {
                            let (x0, x1) = pool_bin(ox, out_w, w);
                            let share = gy[(p * out_h + oy) * out_w + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    g[(p * h + iy) * w + ix] += share;
                                }
                            }
                        }
                    }
                }
            }),
            Op::IndexSelect { input, indices } => with_slot!(*input, |g| {
                let row = numel(&shape(*input)[1..]);
                for (r, &src) in indices.iter().enumerate() {
                    for k in 0..row {
                        g[src * row + k] += gy[r * row + k];
                    }
                }
            }),
            Op::NormalizeRows { input, norms, eps } => with_slot!(*input, |g| {
                let d = shape(*input)[1];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    if norm > *eps {
                        let y = &out[span.clone()];
                        let dot = y.iter().zip(&gy[span.clone()]).map(|(&a, &b)| a * b).sum::<T>();
                        for k in span {
                            g[k] += (gy[k] - out[k] * dot) / norm;
                        }
                    } else {
                        for k in span {
                            g[k] += gy[k] / *eps;
                        }
                    }
                }
            }),
            Op::CrossEntropy { logits, labels, probs } => with_slot!(*logits, |g| {
                let k = shape(*logits)[1];
                let scale = gy[0] / T::of(labels.len() as f64);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        g[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }),
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn permute_data<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Stride in the input of each output axis.
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut y = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..x.len() {
        y.push(x[src]);
        for a in (0..out_shape.len()).rev() {
            idx[a] += 1;
            src += walk[a];
            if idx[a] < out_shape[a] {
                break;
            }
            src -= walk[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    y
}
