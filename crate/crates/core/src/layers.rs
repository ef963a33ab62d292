//! Network architectures: the classifier `f_{μ,W}`, the transformer encoder of the
//! meta-optimizer, and the task-encoder backbones.

use mocl_autodiff::{BatchStats, DropoutKey, NormMode, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::{kaiming_uniform, Bound, ParamSet, LEAKY_SLOPE};

/// Epsilon of every normalization layer.
pub const NORM_EPS: Real = 1e-9;

/// `x[B, in] · w[in, out] + b[out]`
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, b, 1)?)
}

fn push_linear(p: &mut ParamSet, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
    p.push(
        format!("{name}.w"),
        kaiming_uniform(rng, &[fan_in, fan_out], fan_in),
    );
    p.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn apply_linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    linear(
        tape,
        x,
        p.var(&format!("{name}.w")),
        p.var(&format!("{name}.b")),
    )
}

// ---------------------------------------------------------------------------
// Classifier

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierVariant {
    /// One conv block with 32 filters.
    Small,
    /// Three conv blocks with 100 filters each.
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierArch {
    pub variant: ClassifierVariant,
    /// Channels, height, width.
    pub input_shape: [usize; 3],
    pub n_classes: usize,
    /// Filters per conv block; 32 (small) or 100 (cifar) unless overridden.
    pub filters: usize,
}

/// One convolution kernel tensor of W, shaped `[out, in, kh, kw]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelShape {
    pub name: String,
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl KernelShape {
    pub fn numel(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }
}

/// Flat layout of W: kernels concatenated in layer order, each row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightLayout {
    pub kernels: Vec<KernelShape>,
}

impl WeightLayout {
    /// R, the number of scalars in W.
    pub fn total(&self) -> usize {
        self.kernels.iter().map(KernelShape::numel).sum()
    }

    /// Start offset of each layer in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.kernels
            .iter()
            .map(|k| {
                let o = acc;
                acc += k.numel();
                o
            })
            .collect()
    }

    /// Name of the layer owning flat index `i`.
    pub fn layer_of(&self, mut i: usize) -> &str {
        for k in &self.kernels {
            if i < k.numel() {
                return &k.name;
            }
            i -= k.numel();
        }
        "<out of range>"
    }

    pub fn flatten(&self, w: &ParamSet) -> Result<Vec<Real>> {
        let mut out = Vec::with_capacity(self.total());
        for k in &self.kernels {
            let t = w
                .get(&k.name)
                .ok_or_else(|| CoreError::Precondition(format!("missing kernel {}", k.name)))?;
            if t.shape() != k.shape() {
                return Err(CoreError::Precondition(format!(
                    "kernel {} has shape {:?}, expected {:?}",
                    k.name,
                    t.shape(),
                    k.shape()
                )));
            }
            out.extend_from_slice(t.data());
        }
        Ok(out)
    }

    pub fn unflatten(&self, flat: &[Real]) -> Result<ParamSet> {
        if flat.len() != self.total() {
            return Err(CoreError::Precondition(format!(
                "flat weights have length {}, layout expects {}",
                flat.len(),
                self.total()
            )));
        }
        let mut out = ParamSet::new();
        for (k, off) in self.kernels.iter().zip(self.offsets()) {
            let t = Tensor::new(k.shape().to_vec(), flat[off..off + k.numel()].to_vec())?;
            out.push(k.name.clone(), t);
        }
        Ok(out)
    }

    /// Splits a flat `[R]` variable into per-layer kernel variables.
    pub fn split_var(&self, tape: &mut Tape, flat: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.kernels.len());
        for (k, off) in self.kernels.iter().zip(self.offsets()) {
            let s = tape.slice(flat, 0, off, k.numel())?;
            out.push(tape.reshape(s, &k.shape())?);
        }
        Ok(out)
    }
}

/// The two disjoint parameter groups of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// Biases, batch-norm affine parameters and the head.
    pub mu: ParamSet,
    /// Convolution kernels.
    pub w: ParamSet,
}

/// Batch-norm behaviour of a classifier forward pass.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Batch,
    Running(&'a [BatchStats]),
}

pub struct ClassifierOutput {
    pub logits: Var,
    /// Batch statistics per block, present in [`BnMode::Batch`].
    pub batch_stats: Vec<BatchStats>,
}

impl ClassifierArch {
    pub fn small(input_shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            variant: ClassifierVariant::Small,
            input_shape,
            n_classes,
            filters: 32,
        }
    }

    pub fn cifar(input_shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            variant: ClassifierVariant::Cifar,
            input_shape,
            n_classes,
            filters: 100,
        }
    }

    pub fn new(variant: ClassifierVariant, input_shape: [usize; 3], n_classes: usize) -> Self {
        match variant {
            ClassifierVariant::Small => Self::small(input_shape, n_classes),
            ClassifierVariant::Cifar => Self::cifar(input_shape, n_classes),
        }
    }

    /// Toy-sized variant with fewer filters.
    pub fn with_filters(mut self, filters: usize) -> Self {
        self.filters = filters;
        self
    }

    pub fn blocks(&self) -> usize {
        match self.variant {
            ClassifierVariant::Small => 1,
            ClassifierVariant::Cifar => 3,
        }
    }

    /// Width of the flattened features entering the head.
    pub fn feature_dim(&self) -> Result<usize> {
        let [_, mut h, mut w] = self.input_shape;
        for _ in 0..self.blocks() {
            h /= 2;
            w /= 2;
        }
        if h == 0 || w == 0 {
            return Err(CoreError::Precondition(format!(
                "input {:?} too small for {} pooling stages",
                self.input_shape,
                self.blocks()
            )));
        }
        Ok(self.filters * h * w)
    }

    pub fn weight_layout(&self) -> WeightLayout {
        let mut in_ch = self.input_shape[0];
        let kernels = (0..self.blocks())
            .map(|i| {
                let k = KernelShape {
                    name: format!("conv{i}.weight"),
                    out_ch: self.filters,
                    in_ch,
                    kh: 3,
                    kw: 3,
                };
                in_ch = self.filters;
                k
            })
            .collect();
        WeightLayout { kernels }
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<ClassifierParams> {
        if self.n_classes == 0 || self.filters == 0 {
            return Err(CoreError::Precondition(
                "classifier needs ≥1 class and ≥1 filter".into(),
            ));
        }
        let feat = self.feature_dim()?;
        let mut mu = ParamSet::new();
        let mut w = ParamSet::new();
        for k in self.weight_layout().kernels {
            let i = k
                .name
                .trim_start_matches("conv")
                .trim_end_matches(".weight")
                .to_string();
            w.push(
                k.name.clone(),
                kaiming_uniform(rng, &k.shape(), k.in_ch * k.kh * k.kw),
            );
            mu.push(format!("conv{i}.bias"), Tensor::zeros(&[k.out_ch]));
            mu.push(format!("bn{i}.gamma"), Tensor::ones(&[k.out_ch]));
            mu.push(format!("bn{i}.beta"), Tensor::zeros(&[k.out_ch]));
        }
        mu.push(
            "head.weight",
            kaiming_uniform(rng, &[feat, self.n_classes], feat),
        );
        mu.push("head.bias", Tensor::zeros(&[self.n_classes]));
        Ok(ClassifierParams { mu, w })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(CoreError::Precondition(format!(
                "classifier input shape {:?} does not match [B, {:?}]",
                s, self.input_shape
            )));
        }
        Ok(s[0])
    }

    /// Logits `[B, N]` of `f_{μ,W}` on images `x[B, C, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        mu: &Bound,
        w: &[Var],
        x: Var,
        mode: BnMode<'_>,
    ) -> Result<ClassifierOutput> {
        let batch = self.check_input(tape, x)?;
        let head = tape.shape(mu.var("head.weight")).to_vec();
        if head.len() != 2 || head[1] != self.n_classes {
            return Err(CoreError::Precondition(format!(
                "head shape {head:?} disagrees with N = {}",
                self.n_classes
            )));
        }
        if w.len() != self.blocks() {
            return Err(CoreError::Precondition(format!(
                "expected {} kernels, got {}",
                self.blocks(),
                w.len()
            )));
        }
        let mut h = x;
        let mut batch_stats = Vec::new();
        for (i, &kernel) in w.iter().enumerate() {
            let c = tape.conv2d(h, kernel, 1, 1)?;
            let c = tape.add_bias(c, mu.var(&format!("conv{i}.bias")), 1)?;
            let gamma = mu.var(&format!("bn{i}.gamma"));
            let beta = mu.var(&format!("bn{i}.beta"));
            let norm = match mode {
                BnMode::Batch => NormMode::Batch,
                BnMode::Running(stats) => NormMode::Running(&stats[i]),
            };
            let (n, stats) = tape.batchnorm(c, gamma, beta, norm, NORM_EPS)?;
            batch_stats.extend(stats);
            let a = tape.leaky_relu(n, LEAKY_SLOPE)?;
            h = tape.maxpool2x2(a)?;
        }
        let feat = self.feature_dim()?;
        let flat = tape.reshape(h, &[batch, feat])?;
        let logits = linear(tape, flat, mu.var("head.weight"), mu.var("head.bias"))?;
        Ok(ClassifierOutput {
            logits,
            batch_stats,
        })
    }

    /// Forward with W supplied as one flat `[R]` variable.
    pub fn forward_flat(
        &self,
        tape: &mut Tape,
        mu: &Bound,
        w_flat: Var,
        x: Var,
        mode: BnMode<'_>,
    ) -> Result<ClassifierOutput> {
        let kernels = self.weight_layout().split_var(tape, w_flat)?;
        self.forward(tape, mu, &kernels, x, mode)
    }

    pub fn identity_stats(&self) -> Vec<BatchStats> {
        (0..self.blocks())
            .map(|_| BatchStats::identity(self.filters))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Transformer encoder

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub d_token: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: Real,
    /// Rows of the positional table.
    pub capacity: usize,
    /// Width of each per-token output.
    pub out_width: usize,
    pub clamp_scale: Real,
}

/// Dropout sites per layer: attention output, FFN hidden, FFN output.
const SITES_PER_LAYER: u64 = 3;

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_token % self.n_heads != 0 {
            return Err(CoreError::Precondition(format!(
                "d_token {} not divisible by {} heads",
                self.d_token, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Precondition(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        self.validate()?;
        let d = self.d_token;
        let mut p = ParamSet::new();
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        p.push(
            "pos",
            Tensor::from_fn(&[self.capacity, d], |_| normal.sample(rng)),
        );
        for l in 0..self.n_layers {
            for proj in ["q", "k", "v", "o"] {
                push_linear(&mut p, rng, &format!("l{l}.{proj}"), d, d);
            }
            p.push(format!("l{l}.ln1.g"), Tensor::ones(&[d]));
            p.push(format!("l{l}.ln1.b"), Tensor::zeros(&[d]));
            push_linear(&mut p, rng, &format!("l{l}.ff1"), d, self.d_ffn);
            push_linear(&mut p, rng, &format!("l{l}.ff2"), self.d_ffn, d);
            p.push(format!("l{l}.ln2.g"), Tensor::ones(&[d]));
            p.push(format!("l{l}.ln2.b"), Tensor::zeros(&[d]));
        }
        push_linear(&mut p, rng, "head", d, self.out_width);
        Ok(p)
    }

    fn site_key(key: DropoutKey, layer: usize, site: u64) -> DropoutKey {
        DropoutKey {
            seed: key.seed,
            counter: key
                .counter
                .wrapping_mul(1 << 16)
                .wrapping_add(layer as u64 * SITES_PER_LAYER + site),
        }
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        l: usize,
        h: Var,
        maps: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let q = apply_linear(tape, p, &format!("l{l}.q"), h)?;
        let k = apply_linear(tape, p, &format!("l{l}.k"), h)?;
        let v = apply_linear(tape, p, &format!("l{l}.v"), h)?;
        let dh = self.d_token / self.n_heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for head in 0..self.n_heads {
            let qh = tape.slice(q, 1, head * dh, dh)?;
            let kh = tape.slice(k, 1, head * dh, dh)?;
            let vh = tape.slice(v, 1, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s, 1)?;
            if let Some(maps) = maps.as_deref_mut() {
                maps.push(tape.value(a).clone());
            }
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        apply_linear(tape, p, &format!("l{l}.o"), cat)
    }

    fn run(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: Var,
        train: bool,
        key: DropoutKey,
        mut maps: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.d_token {
            return Err(CoreError::Precondition(format!(
                "tokens shape {shape:?}, expected [T, {}]",
                self.d_token
            )));
        }
        if shape[0] > self.capacity {
            return Err(CoreError::Precondition(format!(
                "sequence of {} tokens overflows positional capacity {}",
                shape[0], self.capacity
            )));
        }
        let mut h = tape.embedding_add(tokens, p.var("pos"))?;
        for l in 0..self.n_layers {
            let a = self.attention(tape, p, l, h, &mut maps)?;
            let a = tape.dropout(a, self.dropout, Self::site_key(key, l, 0), train)?;
            let r = tape.add(h, a)?;
            h = tape.layer_norm(
                r,
                p.var(&format!("l{l}.ln1.g")),
                p.var(&format!("l{l}.ln1.b")),
                NORM_EPS,
            )?;
            let f = apply_linear(tape, p, &format!("l{l}.ff1"), h)?;
            let f = tape.gelu(f)?;
            let f = tape.dropout(f, self.dropout, Self::site_key(key, l, 1), train)?;
            let f = apply_linear(tape, p, &format!("l{l}.ff2"), f)?;
            let f = tape.dropout(f, self.dropout, Self::site_key(key, l, 2), train)?;
            let r = tape.add(h, f)?;
            h = tape.layer_norm(
                r,
                p.var(&format!("l{l}.ln2.g")),
                p.var(&format!("l{l}.ln2.b")),
                NORM_EPS,
            )?;
        }
        Ok(h)
    }

    /// Encoder hidden states `[T, d_token]` before the head.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: Var,
        train: bool,
        key: DropoutKey,
    ) -> Result<Var> {
        self.run(tape, p, tokens, train, key, None)
    }

    /// `clamp_scale · tanh(head(h))` per row, strictly inside `(−clamp_scale, clamp_scale)`.
    pub fn head(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        let y = apply_linear(tape, p, "head", hidden)?;
        let y = tape.tanh(y)?;
        // tanh rounds to ±1 for large inputs; shave one ulp so the bound stays open.
        Ok(tape.scale(y, self.clamp_scale * (1.0 - Real::EPSILON))?)
    }

    /// Full encoder plus clamped head: `[T, d_token] → [T, out_width]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: Var,
        train: bool,
        key: DropoutKey,
    ) -> Result<Var> {
        let h = self.encode(tape, p, tokens, train, key)?;
        self.head(tape, p, h)
    }

    /// Attention weights (one `[T, T]` matrix per layer and head) of an eval-mode pass.
    pub fn attention_maps(&self, p: &ParamSet, tokens: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::no_grad();
        let bound = p.bind(&mut tape, false);
        let x = tape.constant(tokens.clone());
        let mut maps = Vec::new();
        self.run(
            &mut tape,
            &bound,
            x,
            false,
            DropoutKey {
                seed: 0,
                counter: 0,
            },
            Some(&mut maps),
        )?;
        Ok(maps)
    }
}

// ---------------------------------------------------------------------------
// Task-encoder backbones

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Two fully connected hidden layers of 100 units.
    Mlp100,
    /// Four conv blocks (16, 32, 64, 64 filters) with 2×2 pooling while the extent allows.
    ConvDeep,
}

const CONV_DEEP_CHANNELS: [usize; 4] = [16, 32, 64, 64];

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp100 => "mlp100",
            Self::ConvDeep => "conv_deep",
        }
    }

    /// Per-example feature width for the given input shape.
    pub fn feature_width(self, input_shape: [usize; 3]) -> usize {
        match self {
            Self::Mlp100 => 100,
            Self::ConvDeep => {
                let (h, w) = conv_deep_extent(input_shape);
                CONV_DEEP_CHANNELS[3] * h * w
            }
        }
    }
}

fn conv_deep_pools(h: usize, w: usize) -> bool {
    h >= 2 && w >= 2
}

fn conv_deep_extent(input_shape: [usize; 3]) -> (usize, usize) {
    let (mut h, mut w) = (input_shape[1], input_shape[2]);
    for _ in CONV_DEEP_CHANNELS {
        if conv_deep_pools(h, w) {
            h /= 2;
            w /= 2;
        }
    }
    (h, w)
}

/// A feature backbone mapping images to fixed-width vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub input_shape: [usize; 3],
    pub params: ParamSet,
}

impl Backbone {
    pub fn new(kind: BackboneKind, input_shape: [usize; 3], rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        match kind {
            BackboneKind::Mlp100 => {
                let d: usize = input_shape.iter().product();
                push_linear(&mut params, rng, "fc0", d, 100);
                push_linear(&mut params, rng, "fc1", 100, 100);
            }
            BackboneKind::ConvDeep => {
                let mut c_in = input_shape[0];
                for (i, &c) in CONV_DEEP_CHANNELS.iter().enumerate() {
                    params.push(
                        format!("conv{i}.w"),
                        kaiming_uniform(rng, &[c, c_in, 3, 3], c_in * 9),
                    );
                    params.push(format!("conv{i}.b"), Tensor::zeros(&[c]));
                    c_in = c;
                }
            }
        }
        Self {
            kind,
            input_shape,
            params,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.kind.feature_width(self.input_shape)
    }

    /// Features `[B, F]` for images `x[B, C, H, W]`.
    pub fn features(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(CoreError::Precondition(format!(
                "backbone input {s:?} does not match [B, {:?}]",
                self.input_shape
            )));
        }
        let b = s[0];
        match self.kind {
            BackboneKind::Mlp100 => {
                let d: usize = self.input_shape.iter().product();
                let mut h = tape.reshape(x, &[b, d])?;
                for name in ["fc0", "fc1"] {
                    h = apply_linear(tape, p, name, h)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                }
                Ok(h)
            }
            BackboneKind::ConvDeep => {
                let mut h = x;
                for i in 0..CONV_DEEP_CHANNELS.len() {
                    h = tape.conv2d(h, p.var(&format!("conv{i}.w")), 1, 1)?;
                    h = tape.add_bias(h, p.var(&format!("conv{i}.b")), 1)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                    let hs = tape.shape(h).to_vec();
                    if conv_deep_pools(hs[2], hs[3]) {
                        h = tape.maxpool2x2(h)?;
                    }
                }
                Ok(tape.reshape(h, &[b, self.feature_width()])?)
            }
        }
    }
}
