//! Bimodal linear-probe classifier with hand-written forward and backward passes.
//!
//! Each modality feature vector goes through an affine embedding layer
//! (`embed_v`, `embed_l`). Each embedding feeds its own classifier head
//! (`head_v`, `head_l`), and the fused embedding (concatenation or sum) feeds
//! the fused classifier `fused`. Five batch-mean losses are produced:
//!
//! * `target`: CE of the fused prediction,
//! * `target_v` / `target_l`: CE of each head,
//! * `kl_v = KL(p_v ‖ p_l)` and `kl_l = KL(p_l ‖ p_v)`.
//!
//! The backward pass returns one full parameter-shaped gradient per loss,
//! plus the split of the fused weight gradient into the blocks that act on
//! the image and text embeddings.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::FeatureRecord;
use crate::error::{invalid, Result};
use crate::numerics::{
    cross_entropy, dot_unchecked, kl_divergence, softmax, Mat64, ProbVec, Vec64,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Add,
}

impl std::str::FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "add" => Ok(Fusion::Add),
            other => Err(format!("unknown fusion `{other}` (expected concat or add)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_l: usize,
    pub d_e: usize,
    pub classes: usize,
    pub fusion: Fusion,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_l == 0 || self.d_e == 0 {
            return Err(invalid("model dimensions must be at least 1"));
        }
        if self.classes < 2 {
            return Err(invalid("model needs at least two classes"));
        }
        Ok(())
    }

    /// Width of the fused classifier input.
    pub fn fused_width(&self) -> usize {
        match self.fusion {
            Fusion::Concat => 2 * self.d_e,
            Fusion::Add => self.d_e,
        }
    }
}

/// `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Mat64,
    pub b: Vec64,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Mat64::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec64> {
        let mut y = self.w.matvec(x)?;
        for (yi, bi) in y.iter_mut().zip(&self.b) {
            *yi += bi;
        }
        Ok(y)
    }

    pub fn len(&self) -> usize {
        self.w.as_slice().len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w.as_slice().iter().chain(self.b.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.as_mut_slice().iter_mut().chain(self.b.iter_mut())
    }

    pub fn dot(&self, other: &Affine) -> f64 {
        dot_unchecked(self.w.as_slice(), other.w.as_slice()) + dot_unchecked(&self.b, &other.b)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Affine) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    /// Accumulates the gradient of an affine map given the upstream `delta`
    /// and the map's input, returning the gradient w.r.t. the input.
    fn backprop(&self, grad: &mut Affine, scale: f64, delta: &[f64], input: &[f64]) -> Result<Vec64> {
        grad.w.add_outer(scale, delta, input)?;
        for (g, d) in grad.b.iter_mut().zip(delta) {
            *g += scale * d;
        }
        self.w.matvec_t(delta)
    }
}

/// Named parameter blocks, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    EmbedV,
    EmbedL,
    HeadV,
    HeadL,
    Fused,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::EmbedV,
        Block::EmbedL,
        Block::HeadV,
        Block::HeadL,
        Block::Fused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::EmbedV => "embed_v",
            Block::EmbedL => "embed_l",
            Block::HeadV => "head_v",
            Block::HeadL => "head_l",
            Block::Fused => "fused",
        }
    }
}

/// All trainable parameters. The same shape doubles as a gradient or an
/// update direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub embed_v: Affine,
    pub embed_l: Affine,
    pub head_v: Affine,
    pub head_l: Affine,
    pub fused: Affine,
}

impl Params {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            embed_v: Affine::zeros(config.d_e, config.d_v),
            embed_l: Affine::zeros(config.d_e, config.d_l),
            head_v: Affine::zeros(config.classes, config.d_e),
            head_l: Affine::zeros(config.classes, config.d_e),
            fused: Affine::zeros(config.classes, config.fused_width()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Affine| Affine::zeros(a.w.rows(), a.w.cols());
        Self {
            embed_v: z(&self.embed_v),
            embed_l: z(&self.embed_l),
            head_v: z(&self.head_v),
            head_l: z(&self.head_l),
            fused: z(&self.fused),
        }
    }

    pub fn block(&self, block: Block) -> &Affine {
        match block {
            Block::EmbedV => &self.embed_v,
            Block::EmbedL => &self.embed_l,
            Block::HeadV => &self.head_v,
            Block::HeadL => &self.head_l,
            Block::Fused => &self.fused,
        }
    }

    pub fn block_mut(&mut self, block: Block) -> &mut Affine {
        match block {
            Block::EmbedV => &mut self.embed_v,
            Block::EmbedL => &mut self.embed_l,
            Block::HeadV => &mut self.head_v,
            Block::HeadL => &mut self.head_l,
            Block::Fused => &mut self.fused,
        }
    }

    /// The model configuration these shapes imply.
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            d_v: self.embed_v.w.cols(),
            d_l: self.embed_l.w.cols(),
            d_e: self.embed_v.w.rows(),
            classes: self.fused.w.rows(),
            fusion: self.fusion(),
        }
    }

    pub fn fusion(&self) -> Fusion {
        if self.fused.w.cols() == 2 * self.embed_v.w.rows() {
            Fusion::Concat
        } else {
            Fusion::Add
        }
    }

    pub fn len(&self) -> usize {
        Block::ALL.iter().map(|&b| self.block(b).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        Block::ALL.into_iter().flat_map(move |b| self.block(b).values())
    }

    pub fn flatten(&self) -> Vec64 {
        self.values().copied().collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(invalid(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut it = flat.iter();
        for b in Block::ALL {
            for (v, f) in self.block_mut(b).values_mut().zip(&mut it) {
                *v = *f;
            }
        }
        Ok(())
    }

    pub fn dot(&self, other: &Params) -> f64 {
        Block::ALL
            .iter()
            .map(|&b| self.block(b).dot(other.block(b)))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for b in Block::ALL {
            self.block_mut(b).axpy(alpha, other.block(b));
        }
    }

    pub fn scaled(&self, alpha: f64) -> Params {
        let mut out = self.zeros_like();
        out.axpy(alpha, self);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Copy with every block outside `keep` zeroed.
    pub fn restricted(&self, keep: &[Block]) -> Params {
        let mut out = self.zeros_like();
        for &b in keep {
            *out.block_mut(b) = self.block(b).clone();
        }
        out
    }

    fn hash_into(&self, h: &mut impl Hasher) {
        for v in self.values() {
            v.to_bits().hash(h);
        }
    }
}

/// Weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::zeros(config);
    for b in Block::ALL {
        let layer = params.block_mut(b);
        let bound = 1.0 / (layer.w.cols() as f64).sqrt();
        for w in layer.w.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(params)
}

/// Batch-mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub target: f64,
    pub target_v: f64,
    pub target_l: f64,
    pub kl_v: f64,
    pub kl_l: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.target, self.target_v, self.target_l, self.kl_v, self.kl_l]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub z_v: Vec<Vec64>,
    pub z_l: Vec<Vec64>,
    pub p_v: Vec<ProbVec>,
    pub p_l: Vec<ProbVec>,
    pub p_t: Vec<ProbVec>,
    pub losses: LossBundle,
    checksum: u64,
}

fn checksum(params: &Params, batch: &[FeatureRecord]) -> u64 {
    let mut h = DefaultHasher::new();
    params.hash_into(&mut h);
    for r in batch {
        r.y.hash(&mut h);
        for v in r.x_v.iter().chain(&r.x_l) {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn validate_batch(params: &Params, batch: &[FeatureRecord]) -> Result<()> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let (d_v, d_l, classes) = (
        params.embed_v.w.cols(),
        params.embed_l.w.cols(),
        params.fused.w.rows(),
    );
    for (i, r) in batch.iter().enumerate() {
        if r.x_v.len() != d_v || r.x_l.len() != d_l {
            return Err(invalid(format!(
                "sample {i}: feature dims ({}, {}) do not match model ({d_v}, {d_l})",
                r.x_v.len(),
                r.x_l.len()
            )));
        }
        if r.y as usize >= classes {
            return Err(invalid(format!(
                "sample {i}: label {} out of range for {classes} classes",
                r.y
            )));
        }
    }
    Ok(())
}

fn fuse(fusion: Fusion, z_v: &[f64], z_l: &[f64]) -> Vec64 {
    match fusion {
        Fusion::Concat => z_v.iter().chain(z_l).copied().collect(),
        Fusion::Add => z_v.iter().zip(z_l).map(|(a, b)| a + b).collect(),
    }
}

pub fn forward(params: &Params, batch: &[FeatureRecord]) -> Result<ForwardOutputs> {
    validate_batch(params, batch)?;
    let fusion = params.fusion();
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut out = ForwardOutputs {
        z_v: Vec::with_capacity(n),
        z_l: Vec::with_capacity(n),
        p_v: Vec::with_capacity(n),
        p_l: Vec::with_capacity(n),
        p_t: Vec::with_capacity(n),
        losses: LossBundle::default(),
        checksum: checksum(params, batch),
    };
    for r in batch {
        let label = r.y as usize;
        let z_v = params.embed_v.apply(&r.x_v)?;
        let z_l = params.embed_l.apply(&r.x_l)?;
        let p_v = softmax(&params.head_v.apply(&z_v)?)?;
        let p_l = softmax(&params.head_l.apply(&z_l)?)?;
        let p_t = softmax(&params.fused.apply(&fuse(fusion, &z_v, &z_l))?)?;

        let l = &mut out.losses;
        l.target += inv_n * cross_entropy(&p_t, label)?;
        l.target_v += inv_n * cross_entropy(&p_v, label)?;
        l.target_l += inv_n * cross_entropy(&p_l, label)?;
        l.kl_v += inv_n * kl_divergence(&p_v, &p_l)?;
        l.kl_l += inv_n * kl_divergence(&p_l, &p_v)?;

        out.z_v.push(z_v);
        out.z_l.push(z_l);
        out.p_v.push(p_v);
        out.p_l.push(p_l);
        out.p_t.push(p_t);
    }
    Ok(out)
}

/// Analytic gradients of every loss in a [`LossBundle`].
///
/// KL gradients are student-only: `kl_v` is `∇ KL(p_v ‖ p_l)` w.r.t. the
/// image branch (`embed_v`, `head_v`) with `p_l` held fixed, and `kl_l`
/// mirrors it for the text branch. All other blocks of those entries are zero.
#[derive(Debug, Clone)]
pub struct GradientSet {
    /// `∇ target` (nonzero on `embed_v`, `embed_l`, `fused`).
    pub target: Params,
    /// Part of `∇_W fused` acting on the image embedding, `classes × d_e`.
    pub target_split_v: Mat64,
    /// Part of `∇_W fused` acting on the text embedding, `classes × d_e`.
    pub target_split_l: Mat64,
    pub ce_v: Params,
    pub ce_l: Params,
    pub kl_v: Params,
    pub kl_l: Params,
}

impl GradientSet {
    /// Image embedding gradient from the target and image-head CE losses.
    pub fn g_v(&self) -> Affine {
        let mut g = self.target.embed_v.clone();
        g.axpy(1.0, &self.ce_v.embed_v);
        g
    }

    pub fn g_l(&self) -> Affine {
        let mut g = self.target.embed_l.clone();
        g.axpy(1.0, &self.ce_l.embed_l);
        g
    }

    pub fn is_finite(&self) -> bool {
        [&self.target, &self.ce_v, &self.ce_l, &self.kl_v, &self.kl_l]
            .iter()
            .all(|p| p.is_finite())
            && self
                .target_split_v
                .as_slice()
                .iter()
                .chain(self.target_split_l.as_slice())
                .all(|v| v.is_finite())
    }
}

fn one_hot_residual(p: &ProbVec, label: usize) -> Vec64 {
    let mut d = p.as_slice().to_vec();
    d[label] -= 1.0;
    d
}

/// `∇_logits KL(p ‖ q)` with `q` fixed: `p ⊙ (ln p − ln q − KL)`.
fn kl_student_delta(p: &ProbVec, q: &ProbVec) -> Vec64 {
    let a: Vec64 = (0..p.len()).map(|i| p.ln_at(i) - q.ln_at(i)).collect();
    let kl = dot_unchecked(p.as_slice(), &a);
    p.as_slice()
        .iter()
        .zip(&a)
        .map(|(pi, ai)| pi * (ai - kl))
        .collect()
}

fn check_outputs(params: &Params, batch: &[FeatureRecord], outputs: &ForwardOutputs) -> Result<()> {
    validate_batch(params, batch)?;
    if outputs.checksum != checksum(params, batch) {
        return Err(invalid(
            "forward outputs were not produced from these params and batch",
        ));
    }
    Ok(())
}

pub fn backward(
    params: &Params,
    batch: &[FeatureRecord],
    outputs: &ForwardOutputs,
) -> Result<GradientSet> {
    check_outputs(params, batch, outputs)?;
    let fusion = params.fusion();
    let d_e = params.embed_v.w.rows();
    let classes = params.fused.w.rows();
    let scale = 1.0 / batch.len() as f64;

    let mut target = params.zeros_like();
    let mut ce_v = params.zeros_like();
    let mut ce_l = params.zeros_like();
    let mut kl_v = params.zeros_like();
    let mut kl_l = params.zeros_like();
    let mut add_split_v = Mat64::zeros(classes, d_e);
    let mut add_split_l = Mat64::zeros(classes, d_e);

    for (i, r) in batch.iter().enumerate() {
        let label = r.y as usize;
        let (z_v, z_l) = (&outputs.z_v[i], &outputs.z_l[i]);

        let delta_t = one_hot_residual(&outputs.p_t[i], label);
        let fused_in = fuse(fusion, z_v, z_l);
        let d_fused = params
            .fused
            .backprop(&mut target.fused, scale, &delta_t, &fused_in)?;
        let (dz_v, dz_l) = match fusion {
            Fusion::Concat => (&d_fused[..d_e], &d_fused[d_e..]),
            Fusion::Add => {
                add_split_v.add_outer(scale, &delta_t, z_v)?;
                add_split_l.add_outer(scale, &delta_t, z_l)?;
                (&d_fused[..], &d_fused[..])
            }
        };
        params.embed_v.backprop(&mut target.embed_v, scale, dz_v, &r.x_v)?;
        params.embed_l.backprop(&mut target.embed_l, scale, dz_l, &r.x_l)?;

        let branches = [
            (
                &mut ce_v,
                one_hot_residual(&outputs.p_v[i], label),
                Block::HeadV,
                Block::EmbedV,
            ),
            (
                &mut ce_l,
                one_hot_residual(&outputs.p_l[i], label),
                Block::HeadL,
                Block::EmbedL,
            ),
            (
                &mut kl_v,
                kl_student_delta(&outputs.p_v[i], &outputs.p_l[i]),
                Block::HeadV,
                Block::EmbedV,
            ),
            (
                &mut kl_l,
                kl_student_delta(&outputs.p_l[i], &outputs.p_v[i]),
                Block::HeadL,
                Block::EmbedL,
            ),
        ];
        for (grad, delta, head, embed) in branches {
            let (z, x) = if head == Block::HeadV {
                (z_v, &r.x_v)
            } else {
                (z_l, &r.x_l)
            };
            backprop_branch(params, grad, head, embed, scale, &delta, z, x)?;
        }
    }

    let (target_split_v, target_split_l) = match fusion {
        Fusion::Concat => (
            target.fused.w.columns(0, d_e)?,
            target.fused.w.columns(d_e, 2 * d_e)?,
        ),
        Fusion::Add => (add_split_v, add_split_l),
    };

    Ok(GradientSet {
        target,
        target_split_v,
        target_split_l,
        ce_v,
        ce_l,
        kl_v,
        kl_l,
    })
}

#[allow(clippy::too_many_arguments)]
fn backprop_branch(
    params: &Params,
    grad: &mut Params,
    head: Block,
    embed: Block,
    scale: f64,
    delta: &[f64],
    z: &[f64],
    x: &[f64],
) -> Result<()> {
    let dz = params
        .block(head)
        .backprop(grad.block_mut(head), scale, delta, z)?;
    params
        .block(embed)
        .backprop(grad.block_mut(embed), scale, &dz, x)?;
    Ok(())
}

/// Exact gradient of `w_v·kl_v + w_l·kl_l` w.r.t. all parameters, with both
/// distributions differentiated (no teacher detachment).
pub fn kl_joint_gradient(
    params: &Params,
    batch: &[FeatureRecord],
    outputs: &ForwardOutputs,
    w_v: f64,
    w_l: f64,
) -> Result<Params> {
    check_outputs(params, batch, outputs)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    for (i, r) in batch.iter().enumerate() {
        let (p_v, p_l) = (&outputs.p_v[i], &outputs.p_l[i]);
        // ∇_{s_q} KL(p ‖ q) with p fixed is q − p.
        let student_v = kl_student_delta(p_v, p_l);
        let student_l = kl_student_delta(p_l, p_v);
        let delta_v: Vec64 = (0..p_v.len())
            .map(|k| {
                w_v * student_v[k] + w_l * (p_v.as_slice()[k] - p_l.as_slice()[k])
            })
            .collect();
        let delta_l: Vec64 = (0..p_l.len())
            .map(|k| {
                w_l * student_l[k] + w_v * (p_l.as_slice()[k] - p_v.as_slice()[k])
            })
            .collect();
        backprop_branch(
            params,
            &mut grad,
            Block::HeadV,
            Block::EmbedV,
            scale,
            &delta_v,
            &outputs.z_v[i],
            &r.x_v,
        )?;
        backprop_branch(
            params,
            &mut grad,
            Block::HeadL,
            Block::EmbedL,
            scale,
            &delta_l,
            &outputs.z_l[i],
            &r.x_l,
        )?;
    }
    Ok(grad)
}
