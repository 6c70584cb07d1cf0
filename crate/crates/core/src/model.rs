//! SDHSI-Net: a 3D→2D convolutional teacher with two early-exit student heads.
//!
//! ```text
//! input N×1×B×S×S
//!   └ 4× [conv3d → BN → ReLU] ──┬─ spectral mean ─ student 1
//!     reshape (C·D)×S×S          │
//!   └ 2× [conv2d → BN → ReLU] → DropBlock ──┬─ student 2
//!   └ pool 4×4 → FC 256 → ReLU → dropout → FC 128 → ReLU (f_T) → classifier
//!
//! student: pool to a t×t token grid → self-attention → global mean
//!          → FC 128 → ReLU (f_S) → classifier
//! ```

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, batchnorm, he_uniform, BatchNormStats, BatchNormUpdate, Binder, DropBlockConfig, Mode, ParamId,
    ParamStore,
};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdhsiConfig {
    /// Spatial patch side `S`.
    pub patch: usize,
    /// Spectral bands `B` after PCA.
    pub bands: usize,
    pub classes: usize,
    pub conv3d_channels: Vec<usize>,
    pub conv3d_spectral_kernels: Vec<usize>,
    /// Spatial kernel side shared by every conv ('same' padded).
    pub spatial_kernel: usize,
    pub conv2d_channels: Vec<usize>,
    /// Side of the grid the last feature map is pooled to before the teacher FC head.
    pub head_pool: usize,
    /// Teacher FC widths; the last one is the embedding `f_T`.
    pub fc_widths: Vec<usize>,
    pub dropout: f64,
    pub dropblock: DropBlockConfig,
    pub student_hidden: usize,
    /// Side of the token grid each student attends over.
    pub student_tokens: usize,
    pub include_students: bool,
}

impl SdhsiConfig {
    /// Default architecture for `S×S×B` patches and `K` classes.
    pub fn new(patch: usize, bands: usize, classes: usize) -> Self {
        Self {
            patch,
            bands,
            classes,
            conv3d_channels: vec![8, 16, 32, 64],
            conv3d_spectral_kernels: vec![7, 5, 3, 3],
            spatial_kernel: 3,
            conv2d_channels: vec![128, 64],
            head_pool: 4,
            fc_widths: vec![256, 128],
            dropout: 0.4,
            dropblock: DropBlockConfig::default(),
            student_hidden: 128,
            student_tokens: 4,
            include_students: true,
        }
    }

    /// 17×17 patches of 30 PCA bands, 16 classes.
    pub fn indian_pines() -> Self {
        Self::new(17, 30, 16)
    }

    /// Spectral depth after each 3D conv, starting with the input depth.
    pub fn spectral_depths(&self) -> Vec<isize> {
        let mut d = vec![self.bands as isize];
        for &k in &self.conv3d_spectral_kernels {
            d.push(d.last().unwrap() - k as isize + 1);
        }
        d
    }

    pub fn embedding_dim(&self) -> usize {
        *self.fc_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.patch == 0 || self.patch.is_multiple_of(2) {
            return bad(format!("patch size must be odd, got {}", self.patch));
        }
        if self.bands == 0 || self.classes == 0 {
            return bad("bands and classes must be positive".into());
        }
        if self.conv3d_channels.is_empty() || self.conv3d_channels.len() != self.conv3d_spectral_kernels.len() {
            return bad("conv3d channel and kernel plans must be non-empty and of equal length".into());
        }
        if self.conv2d_channels.is_empty() || self.fc_widths.is_empty() {
            return bad("conv2d and fc plans must be non-empty".into());
        }
        let all = self.conv3d_channels.iter().chain(&self.conv2d_channels).chain(&self.fc_widths);
        if all.chain(&self.conv3d_spectral_kernels).any(|&c| c == 0) {
            return bad("layer widths and kernels must be positive".into());
        }
        let depths = self.spectral_depths();
        if let Some(i) = depths.iter().position(|&d| d < 1) {
            return bad(format!(
                "spectral depth falls to {} after 3D conv {} (bands {}, kernels {:?})",
                depths[i], i, self.bands, self.conv3d_spectral_kernels
            ));
        }
        if self.spatial_kernel.is_multiple_of(2) || self.spatial_kernel > self.patch {
            return bad(format!("spatial kernel {} must be odd and fit the patch", self.spatial_kernel));
        }
        if self.head_pool == 0 || self.head_pool > self.patch {
            return bad(format!("head pool grid {} must be in 1..={}", self.head_pool, self.patch));
        }
        if self.student_tokens == 0 || self.student_tokens > self.patch {
            return bad(format!("student token grid {} must be in 1..={}", self.student_tokens, self.patch));
        }
        if self.student_hidden != self.embedding_dim() {
            return bad(format!(
                "student hidden width {} must equal the teacher embedding width {}",
                self.student_hidden,
                self.embedding_dim()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.dropblock.validate(self.patch, self.patch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    S1,
    S2,
    Teacher,
}

impl Head {
    /// Reporting order: S1, S2, Teacher.
    pub const ALL: [Head; 3] = [Head::S1, Head::S2, Head::Teacher];

    pub fn name(self) -> &'static str {
        match self {
            Head::S1 => "s1",
            Head::S2 => "s2",
            Head::Teacher => "teacher",
        }
    }

    pub fn is_student(self) -> bool {
        self != Head::Teacher
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Head::S1),
            "s2" => Ok(Head::S2),
            "teacher" | "t" => Ok(Head::Teacher),
            other => Err(Error::config(format!("unknown head {other:?} (expected teacher, s1 or s2)"))),
        }
    }
}

/// Which heads a forward pass must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSet {
    pub s1: bool,
    pub s2: bool,
    pub teacher: bool,
}

impl HeadSet {
    pub const ALL: HeadSet = HeadSet {
        s1: true,
        s2: true,
        teacher: true,
    };
    pub const TEACHER: HeadSet = HeadSet {
        s1: false,
        s2: false,
        teacher: true,
    };

    pub fn of(heads: &[Head]) -> Self {
        HeadSet {
            s1: heads.contains(&Head::S1),
            s2: heads.contains(&Head::S2),
            teacher: heads.contains(&Head::Teacher),
        }
    }

    pub fn only(head: Head) -> Self {
        HeadSet {
            s1: head == Head::S1,
            s2: head == Head::S2,
            teacher: head == Head::Teacher,
        }
    }

    pub fn contains(&self, head: Head) -> bool {
        match head {
            Head::S1 => self.s1,
            Head::S2 => self.s2,
            Head::Teacher => self.teacher,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `N×K` class scores.
    pub logits: Var,
    /// `N×d` embedding (`f_T` for the teacher, `f_S` for students).
    pub features: Var,
}

/// Outputs of one forward pass. Heads that were not requested are `None`.
#[derive(Debug)]
pub struct ForwardBundle<T = f32> {
    pub teacher: Option<HeadOutput>,
    pub s1: Option<HeadOutput>,
    pub s2: Option<HeadOutput>,
    /// Batch statistics to fold into running stats (train mode only), by buffer index.
    pub bn_updates: Vec<(usize, BatchNormUpdate<T>)>,
}

impl<T> ForwardBundle<T> {
    pub fn head(&self, head: Head) -> Option<HeadOutput> {
        match head {
            Head::S1 => self.s1,
            Head::S2 => self.s2,
            Head::Teacher => self.teacher,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct DenseIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct StudentIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    hidden: DenseIds,
    out: DenseIds,
}

/// Named running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedStats<T> {
    pub name: String,
    pub stats: BatchNormStats<T>,
}

#[derive(Clone, Debug)]
pub struct SdhsiModel<T: Element = f32> {
    config: SdhsiConfig,
    params: ParamStore<T>,
    buffers: Vec<NamedStats<T>>,
    conv3d: Vec<ConvBlock>,
    conv2d: Vec<ConvBlock>,
    fc: Vec<DenseIds>,
    classifier: DenseIds,
    students: [Option<StudentIds>; 2],
}

struct Builder<'r, T: Element, R: Rng> {
    params: ParamStore<T>,
    buffers: Vec<NamedStats<T>>,
    rng: &'r mut R,
}

impl<T: Element, R: Rng> Builder<'_, T, R> {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let t = he_uniform(shape, fan_in, self.rng);
        self.params.add(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId> {
        self.params.add(name, Tensor::full(shape, T::of(v)))
    }

    fn dense(&mut self, prefix: &str, din: usize, dout: usize) -> Result<DenseIds> {
        Ok(DenseIds {
            weight: self.he(format!("{prefix}.weight"), &[din, dout], din)?,
            bias: self.fill(format!("{prefix}.bias"), &[dout], 0.0)?,
        })
    }

    fn conv(&mut self, prefix: &str, bn: &str, shape: &[usize]) -> Result<ConvBlock> {
        let cout = shape[0];
        let fan_in = shape[1..].iter().product();
        let block = ConvBlock {
            weight: self.he(format!("{prefix}.weight"), shape, fan_in)?,
            bias: self.fill(format!("{prefix}.bias"), &[cout], 0.0)?,
            gamma: self.fill(format!("{bn}.gamma"), &[cout], 1.0)?,
            beta: self.fill(format!("{bn}.beta"), &[cout], 0.0)?,
            stats: self.buffers.len(),
        };
        self.buffers.push(NamedStats {
            name: bn.to_string(),
            stats: BatchNormStats::new(cout),
        });
        Ok(block)
    }

    fn student(&mut self, prefix: &str, channels: usize, hidden: usize, classes: usize) -> Result<StudentIds> {
        Ok(StudentIds {
            wq: self.he(format!("{prefix}.attn.wq"), &[channels, channels], channels)?,
            wk: self.he(format!("{prefix}.attn.wk"), &[channels, channels], channels)?,
            wv: self.he(format!("{prefix}.attn.wv"), &[channels, channels], channels)?,
            hidden: self.dense(&format!("{prefix}.fc.0"), channels, hidden)?,
            out: self.dense(&format!("{prefix}.fc.1"), hidden, classes)?,
        })
    }
}

impl<T: Element> SdhsiModel<T> {
    /// Builds a freshly initialized model (He-uniform weights, zero biases).
    pub fn build(config: &SdhsiConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let k = cfg.spatial_kernel;
        let mut b = Builder {
            params: ParamStore::new(),
            buffers: Vec::new(),
            rng,
        };

        let mut cin = 1;
        let mut conv3d = Vec::new();
        for (i, (&cout, &kd)) in cfg.conv3d_channels.iter().zip(&cfg.conv3d_spectral_kernels).enumerate() {
            conv3d.push(b.conv(
                &format!("teacher.conv3d.{i}"),
                &format!("teacher.bn3d.{i}"),
                &[cout, cin, kd, k, k],
            )?);
            cin = cout;
        }
        let c3 = cin;
        let depth = *cfg.spectral_depths().last().unwrap() as usize;

        let mut cin = c3 * depth;
        let mut conv2d = Vec::new();
        for (i, &cout) in cfg.conv2d_channels.iter().enumerate() {
            conv2d.push(b.conv(
                &format!("teacher.conv2d.{i}"),
                &format!("teacher.bn2d.{i}"),
                &[cout, cin, k, k],
            )?);
            cin = cout;
        }
        let c2 = cin;

        let mut din = c2 * cfg.head_pool * cfg.head_pool;
        let mut fc = Vec::new();
        for (i, &dout) in cfg.fc_widths.iter().enumerate() {
            fc.push(b.dense(&format!("teacher.fc.{i}"), din, dout)?);
            din = dout;
        }
        let classifier = b.dense("teacher.classifier", din, cfg.classes)?;

        let students = if cfg.include_students {
            [
                Some(b.student("s1", c3, cfg.student_hidden, cfg.classes)?),
                Some(b.student("s2", c2, cfg.student_hidden, cfg.classes)?),
            ]
        } else {
            [None, None]
        };

        Ok(Self {
            config: cfg,
            params: b.params,
            buffers: b.buffers,
            conv3d,
            conv2d,
            fc,
            classifier,
            students,
        })
    }

    pub fn config(&self) -> &SdhsiConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedStats<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedStats<T>] {
        &mut self.buffers
    }

    pub fn has_students(&self) -> bool {
        self.students[0].is_some()
    }

    /// Whether `head` can be evaluated by this model.
    pub fn supports(&self, head: Head) -> bool {
        !head.is_student() || self.has_students()
    }

    fn conv_ids(blocks: &[ConvBlock]) -> impl Iterator<Item = ParamId> + '_ {
        blocks.iter().flat_map(|b| [b.weight, b.bias, b.gamma, b.beta])
    }

    fn student_ids(s: &StudentIds) -> [ParamId; 7] {
        [s.wq, s.wk, s.wv, s.hidden.weight, s.hidden.bias, s.out.weight, s.out.bias]
    }

    /// Parameters on the compute path that produces `head`'s logits.
    pub fn path_params(&self, head: Head) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = Self::conv_ids(&self.conv3d).collect();
        match head {
            Head::S1 => {
                if let Some(s) = &self.students[0] {
                    ids.extend(Self::student_ids(s));
                }
            }
            Head::S2 => {
                ids.extend(Self::conv_ids(&self.conv2d));
                if let Some(s) = &self.students[1] {
                    ids.extend(Self::student_ids(s));
                }
            }
            Head::Teacher => {
                ids.extend(Self::conv_ids(&self.conv2d));
                for d in self.fc.iter().chain(std::iter::once(&self.classifier)) {
                    ids.extend([d.weight, d.bias]);
                }
            }
        }
        ids
    }

    /// Parameters used only by a student head.
    pub fn student_params(&self, head: Head) -> Vec<ParamId> {
        let slot = match head {
            Head::S1 => &self.students[0],
            Head::S2 => &self.students[1],
            Head::Teacher => return Vec::new(),
        };
        slot.as_ref().map(|s| Self::student_ids(s).to_vec()).unwrap_or_default()
    }

    /// Number of scalar parameters needed to produce `head`'s logits.
    pub fn count_params(&self, head: Head) -> usize {
        if !self.supports(head) {
            return 0;
        }
        self.params.count(self.path_params(head))
    }

    /// Folds train-mode batch statistics into the running stats.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchNormUpdate<T>)]) {
        for (i, u) in updates {
            self.buffers[*i].stats.absorb(u);
        }
    }

    /// Copy without the student heads, for deployment.
    pub fn strip_students(&self) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.include_students = false;
        let mut out = Self::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        for id in out.params.ids().collect::<Vec<_>>() {
            let name = out.params.name(id).to_string();
            let src = self.params.id(&name).expect("teacher parameter present");
            *out.params.get_mut(id) = self.params.get(src).clone();
        }
        out.buffers = self.buffers.clone();
        Ok(out)
    }

    fn check_input(&self, g: &Graph<T>, input: Var) -> Result<usize> {
        let c = &self.config;
        let s = g.shape(input);
        if s.len() != 5 || s[1] != 1 || s[2] != c.bands || s[3] != c.patch || s[4] != c.patch {
            return Err(Error::shape("model input", s, &[0, 1, c.bands, c.patch, c.patch]));
        }
        Ok(s[0])
    }

    /// Runs the network on `N×1×B×S×S` input, computing only what `heads` needs.
    ///
    /// `rng` drives DropBlock and dropout in train mode and is unused in eval mode.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder<'_, T>,
        input: Var,
        mode: Mode,
        heads: HeadSet,
        rng: &mut impl Rng,
    ) -> Result<ForwardBundle<T>> {
        let n = self.check_input(g, input)?;
        let (s1_slot, s2_slot) = (self.students[0].as_ref(), self.students[1].as_ref());
        for (want, slot, head) in [(heads.s1, s1_slot, Head::S1), (heads.s2, s2_slot, Head::S2)] {
            if want && slot.is_none() {
                return Err(Error::config(format!("head {head} requested from a model without student heads")));
            }
        }
        let cfg = &self.config;
        let half = cfg.spatial_kernel / 2;
        let mut bundle = ForwardBundle {
            teacher: None,
            s1: None,
            s2: None,
            bn_updates: Vec::new(),
        };

        let block = |g: &mut Graph<T>, binder: &mut Binder<'_, T>, x: Var, b: &ConvBlock, conv3: bool, updates: &mut Vec<_>| -> Result<Var> {
            let w = binder.var(g, b.weight);
            let bias = binder.var(g, b.bias);
            let y = if conv3 {
                g.conv3d(x, w, bias, [0, half, half], [1, 1, 1])?
            } else {
                g.conv2d(x, w, bias, [half, half], [1, 1])?
            };
            let gamma = binder.var(g, b.gamma);
            let beta = binder.var(g, b.beta);
            let (y, update) = batchnorm(g, y, gamma, beta, &self.buffers[b.stats].stats, mode)?;
            if let Some(u) = update {
                updates.push((b.stats, u));
            }
            Ok(g.relu(y))
        };

        let mut x = input;
        for b in &self.conv3d {
            x = block(g, binder, x, b, true, &mut bundle.bn_updates)?;
        }
        if heads.s1 {
            let pooled = g.mean_axes(x, &[2])?;
            bundle.s1 = Some(self.student(g, binder, pooled, s1_slot.unwrap())?);
        }
        if !heads.s2 && !heads.teacher {
            return Ok(bundle);
        }

        let s = g.shape(x).to_vec();
        let mut x = g.reshape(x, &[n, s[1] * s[2], s[3], s[4]])?;
        for b in &self.conv2d {
            x = block(g, binder, x, b, false, &mut bundle.bn_updates)?;
        }
        let x = layers::dropblock(g, x, &cfg.dropblock, mode, rng)?;
        if heads.s2 {
            bundle.s2 = Some(self.student(g, binder, x, s2_slot.unwrap())?);
        }
        if !heads.teacher {
            return Ok(bundle);
        }

        let p = cfg.head_pool;
        let pooled = g.adaptive_avg_pool2d(x, p, p)?;
        let c2 = g.shape(pooled)[1];
        let mut h = g.reshape(pooled, &[n, c2 * p * p])?;
        let last = self.fc.len() - 1;
        for (i, d) in self.fc.iter().enumerate() {
            let (w, b) = (binder.var(g, d.weight), binder.var(g, d.bias));
            let z = layers::dense(g, h, w, b)?;
            h = g.relu(z);
            if i + 1 == last {
                h = layers::dropout(g, h, cfg.dropout, mode, rng)?;
            }
        }
        let (w, b) = (binder.var(g, self.classifier.weight), binder.var(g, self.classifier.bias));
        let logits = layers::dense(g, h, w, b)?;
        bundle.teacher = Some(HeadOutput { logits, features: h });
        Ok(bundle)
    }

    fn student(&self, g: &mut Graph<T>, binder: &mut Binder<'_, T>, x: Var, ids: &StudentIds) -> Result<HeadOutput> {
        let t = self.config.student_tokens;
        let tokens = g.adaptive_avg_pool2d(x, t, t)?;
        let (wq, wk, wv) = (binder.var(g, ids.wq), binder.var(g, ids.wk), binder.var(g, ids.wv));
        let attended = layers::self_attention(g, tokens, wq, wk, wv)?;
        let pooled = layers::global_avg_pool(g, attended)?;
        let (w, b) = (binder.var(g, ids.hidden.weight), binder.var(g, ids.hidden.bias));
        let hidden = layers::dense(g, pooled, w, b)?;
        let features = g.relu(hidden);
        let (w, b) = (binder.var(g, ids.out.weight), binder.var(g, ids.out.bias));
        let logits = layers::dense(g, features, w, b)?;
        Ok(HeadOutput { logits, features })
    }

    /// Eval-mode logits of `head` for a flat `N×1×B×S×S` batch.
    pub fn logits(&self, batch: &[T], head: Head) -> Result<Vec<T>> {
        Ok(self.logits_many(batch, &[head])?.pop().expect("one head requested"))
    }

    /// Eval-mode logits of several heads from one shared forward pass, in `heads` order.
    pub fn logits_many(&self, batch: &[T], heads: &[Head]) -> Result<Vec<Vec<T>>> {
        let c = &self.config;
        let per = c.bands * c.patch * c.patch;
        if batch.is_empty() || !batch.len().is_multiple_of(per) {
            return Err(Error::shape("model input", &[batch.len()], &[per]));
        }
        let n = batch.len() / per;
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, false);
        let x = g.constant(Tensor::new(vec![n, 1, c.bands, c.patch, c.patch], batch.to_vec())?);
        let out = self.forward(&mut g, &mut binder, x, Mode::Eval, HeadSet::of(heads), &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(heads
            .iter()
            .map(|&h| g.data(out.head(h).expect("requested head computed").logits).to_vec())
            .collect())
    }
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows<T: Element>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}
