//! The learned optimizer `g_ψ`: task encoder, weight feature extractor and
//! transformer encoder, mapping (support set, W, scores) to ΔW.

use mocl_autodiff::{DropoutKey, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::importance::{self, Allocation, ImportanceScores};
use crate::layers::{linear, Backbone, BackboneKind, TransformerConfig, WeightLayout};
use crate::optim::Adam;
use crate::params::{kaiming_uniform, Bound, ParamSet};
use crate::streams::{DataSplits, Episode};

/// Inputs available to an update rule at one inner iteration.
pub struct UpdateContext<'a> {
    pub support: &'a Episode,
    /// Current flat weights W.
    pub w: &'a [Real],
    /// `None` when the rule does not consume scores.
    pub scores: Option<&'a ImportanceScores>,
    /// Signed support-loss gradient with respect to W, when scores were computed.
    pub raw_grad: Option<&'a [Real]>,
    pub train: bool,
    pub dropout: DropoutKey,
}

/// Anything that proposes ΔW from the current inner-loop state.
pub trait UpdateRule {
    /// Fresh trainable parameters ψ.
    fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParamSet>;

    /// Whether importance scores are computed and handed to [`UpdateRule::predict`].
    fn uses_scores(&self) -> bool;

    /// ΔW as a `[R]` variable differentiable with respect to `psi`.
    fn predict(&self, tape: &mut Tape, psi: &Bound, ctx: &UpdateContext<'_>) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskEncoderKind {
    /// Frozen backbone, mean over the support, trainable projection.
    Backbone,
    /// Flattened pixels, mean over the support, one linear layer.
    Simple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureExtractorKind {
    /// One hidden layer with GELU.
    Mlp,
    /// A single linear layer.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaOptimizerConfig {
    pub allocation: Allocation,
    pub hard_mask: bool,
    pub use_scores: bool,
    pub keep_fraction: Real,
    pub task_encoder: TaskEncoderKind,
    pub feature_extractor: FeatureExtractorKind,
    pub d_feat: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: Real,
    pub clamp_scale: Real,
    /// Scale applied to the Kaiming bound of the update head weights.
    pub head_init_scale: Real,
}

impl Default for MetaOptimizerConfig {
    fn default() -> Self {
        Self {
            allocation: Allocation::Spatial,
            hard_mask: false,
            use_scores: true,
            keep_fraction: importance::KEEP_FRACTION,
            task_encoder: TaskEncoderKind::Backbone,
            feature_extractor: FeatureExtractorKind::Mlp,
            d_feat: 16,
            d_hidden: 16,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 64,
            dropout: 0.2,
            clamp_scale: 3.0,
            head_init_scale: 1.0,
        }
    }
}

/// Token widths: features, scores, zero padding, and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenDims {
    pub d_feat: usize,
    pub d_score: usize,
    pub d_pad: usize,
    pub d_token: usize,
}

impl TokenDims {
    pub fn new(d_feat: usize, d_score: usize, n_heads: usize) -> Self {
        let d_token = (d_feat + d_score).div_ceil(n_heads) * n_heads;
        Self {
            d_feat,
            d_score,
            d_pad: d_token - d_feat - d_score,
            d_token,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaOptimizer {
    pub config: MetaOptimizerConfig,
    pub layout: WeightLayout,
    pub input_shape: [usize; 3],
    pub dims: TokenDims,
    /// Weight sub-vector width.
    pub width: usize,
    pub n_tokens: usize,
    pub transformer: TransformerConfig,
    /// Frozen backbone of the task encoder.
    pub backbone: Option<Backbone>,
}

impl MetaOptimizer {
    pub fn new(
        config: MetaOptimizerConfig,
        layout: WeightLayout,
        input_shape: [usize; 3],
        backbone: Option<Backbone>,
    ) -> Result<Self> {
        let width = importance::token_width(&layout, config.allocation)?;
        let n_tokens = layout.total() / width;
        let dims = TokenDims::new(config.d_feat, width, config.n_heads);
        match (config.task_encoder, &backbone) {
            (TaskEncoderKind::Backbone, None) => {
                return Err(CoreError::Precondition(
                    "the backbone task encoder needs a backbone".into(),
                ))
            }
            (TaskEncoderKind::Backbone, Some(b)) if b.input_shape != input_shape => {
                return Err(CoreError::Precondition(format!(
                    "backbone expects {:?}, classifier inputs are {input_shape:?}",
                    b.input_shape
                )))
            }
            _ => {}
        }
        let transformer = TransformerConfig {
            d_token: dims.d_token,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            d_ffn: config.d_ffn,
            dropout: config.dropout,
            capacity: 1 + n_tokens,
            out_width: width,
            clamp_scale: config.clamp_scale,
        };
        transformer.validate()?;
        let backbone = if config.task_encoder == TaskEncoderKind::Backbone {
            backbone
        } else {
            None
        };
        Ok(Self {
            config,
            layout,
            input_shape,
            dims,
            width,
            n_tokens,
            transformer,
            backbone,
        })
    }

    /// Length of the transformer input sequence.
    pub fn sequence_len(&self) -> usize {
        1 + self.n_tokens
    }

    fn encoder_input_width(&self) -> usize {
        match &self.backbone {
            Some(b) => b.feature_width(),
            None => self.input_shape.iter().product(),
        }
    }

    /// Task token `[1, d_token]` from unlabelled support images `[B, C, H, W]`.
    pub fn encode_task(&self, tape: &mut Tape, psi: &Bound, support_x: Var) -> Result<Var> {
        let s = tape.shape(support_x).to_vec();
        if s.is_empty() || s[0] == 0 {
            return Err(CoreError::Precondition("empty support".into()));
        }
        let b = s[0];
        let feats = match &self.backbone {
            Some(backbone) => {
                let frozen = backbone.params.bind(tape, false);
                backbone.features(tape, &frozen, support_x)?
            }
            None => {
                let d = self.encoder_input_width();
                tape.reshape(support_x, &[b, d])?
            }
        };
        let pooled = tape.mean(feats, 0)?;
        let pooled = tape.reshape(pooled, &[1, self.encoder_input_width()])?;
        linear(tape, pooled, psi.var("task.proj.w"), psi.var("task.proj.b"))
    }

    fn featurize(&self, tape: &mut Tape, psi: &Bound, weights: Var) -> Result<Var> {
        match self.config.feature_extractor {
            FeatureExtractorKind::Mlp => {
                let h = linear(tape, weights, psi.var("feat.fc0.w"), psi.var("feat.fc0.b"))?;
                let h = tape.gelu(h)?;
                linear(tape, h, psi.var("feat.fc1.w"), psi.var("feat.fc1.b"))
            }
            FeatureExtractorKind::Linear => {
                linear(tape, weights, psi.var("feat.lin.w"), psi.var("feat.lin.b"))
            }
        }
    }

    /// Per-token update matrix `[T, width]` before masking.
    fn token_updates(
        &self,
        tape: &mut Tape,
        psi: &Bound,
        ctx: &UpdateContext<'_>,
        scores: &ImportanceScores,
    ) -> Result<Var> {
        let tokens = importance::tokenize(ctx.w, scores, &self.layout, self.config.allocation)?;
        let (t, width) = (self.n_tokens, self.width);
        let weights = tape.constant(Tensor::new(vec![t, width], tokens.weights)?);
        let feats = self.featurize(tape, psi, weights)?;
        let d_side = self.dims.d_score + self.dims.d_pad;
        let mut side = vec![0.0; t * d_side];
        for (row, chunk) in tokens.scores.chunks_exact(width).enumerate() {
            side[row * d_side..row * d_side + width].copy_from_slice(chunk);
        }
        let side = tape.constant(Tensor::new(vec![t, d_side], side)?);
        let weight_tokens = tape.concat(&[feats, side], 1)?;
        let support_x = tape.constant(ctx.support.support_x.clone());
        let task = self.encode_task(tape, psi, support_x)?;
        let seq = tape.concat(&[task, weight_tokens], 0)?;
        let hidden =
            self.transformer
                .encode(tape, &psi_transformer(psi), seq, ctx.train, ctx.dropout)?;
        let hidden = tape.slice(hidden, 0, 1, t)?;
        self.transformer.head(tape, &psi_transformer(psi), hidden)
    }
}

/// View of ψ restricted to the transformer entries, with the prefix stripped.
fn psi_transformer(psi: &Bound) -> Bound {
    psi.with_prefix("tr.")
}

impl UpdateRule for MetaOptimizer {
    fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        let d_in = self.encoder_input_width();
        let d = self.dims.d_token;
        p.push("task.proj.w", kaiming_uniform(rng, &[d_in, d], d_in));
        p.push("task.proj.b", Tensor::zeros(&[d]));
        match self.config.feature_extractor {
            FeatureExtractorKind::Mlp => {
                let h = self.config.d_hidden;
                p.push(
                    "feat.fc0.w",
                    kaiming_uniform(rng, &[self.width, h], self.width),
                );
                p.push("feat.fc0.b", Tensor::zeros(&[h]));
                p.push(
                    "feat.fc1.w",
                    kaiming_uniform(rng, &[h, self.dims.d_feat], h),
                );
                p.push("feat.fc1.b", Tensor::zeros(&[self.dims.d_feat]));
            }
            FeatureExtractorKind::Linear => {
                p.push(
                    "feat.lin.w",
                    kaiming_uniform(rng, &[self.width, self.dims.d_feat], self.width),
                );
                p.push("feat.lin.b", Tensor::zeros(&[self.dims.d_feat]));
            }
        }
        let mut tr = self.transformer.init(rng)?;
        if let Some(hw) = tr.get_mut("head.w") {
            let c = self.config.head_init_scale;
            hw.data_mut().iter_mut().for_each(|v| *v *= c);
        }
        p.extend_prefixed("tr.", &tr);
        Ok(p)
    }

    fn uses_scores(&self) -> bool {
        self.config.use_scores
    }

    fn predict(&self, tape: &mut Tape, psi: &Bound, ctx: &UpdateContext<'_>) -> Result<Var> {
        let r = self.layout.total();
        if ctx.w.len() != r {
            return Err(CoreError::Precondition(format!(
                "W has {} entries, layout expects {r}",
                ctx.w.len()
            )));
        }
        let zeros;
        let scores = match (self.config.use_scores, ctx.scores) {
            (true, Some(s)) => s,
            (true, None) => {
                return Err(CoreError::Precondition(
                    "scores required but not supplied".into(),
                ))
            }
            (false, _) => {
                zeros = ImportanceScores::zeros(r);
                &zeros
            }
        };
        let mut u = self.token_updates(tape, psi, ctx, scores)?;
        if self.config.hard_mask && self.config.use_scores {
            let mask = scores
                .kept_mask
                .iter()
                .map(|&k| if k { 1.0 } else { 0.0 })
                .collect();
            let mask = tape.constant(Tensor::new(vec![self.n_tokens, self.width], mask)?);
            u = tape.mul(u, mask)?;
        }
        Ok(tape.reshape(u, &[r])?)
    }
}

/// Outcome of supervised pretraining of a task-encoder backbone.
#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub backbone: Backbone,
    pub final_loss: Real,
    pub heldout_accuracy: Real,
    pub chance: Real,
}

fn batch_of(examples: &[&crate::streams::Example]) -> Result<(Tensor, Vec<usize>)> {
    let mut shape = vec![examples.len()];
    shape.extend_from_slice(examples[0].image.shape());
    let data = examples
        .iter()
        .flat_map(|e| e.image.data().iter().copied())
        .collect();
    Ok((
        Tensor::new(shape, data)?,
        examples.iter().map(|e| e.label).collect(),
    ))
}

/// Trains backbone plus a temporary linear head on `corpus`, then discards the head.
pub fn pretrain_task_encoder(
    kind: BackboneKind,
    corpus: &DataSplits,
    steps: usize,
    seed: u64,
) -> Result<PretrainReport> {
    const BATCH: usize = 32;
    const LR: Real = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = Backbone::new(kind, corpus.image_shape, &mut rng);
    let f = backbone.feature_width();
    let n = corpus.n_labels;
    let mut head = ParamSet::new();
    head.push("w", kaiming_uniform(&mut rng, &[f, n], f));
    head.push("b", Tensor::zeros(&[n]));
    let mut opt_b = Adam::new(&backbone.params, 0.0);
    let mut opt_h = Adam::new(&head, 0.0);
    if corpus.train.is_empty() || corpus.test.is_empty() {
        return Err(CoreError::InsufficientData(
            "pretraining corpus is empty".into(),
        ));
    }
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut cursor = order.len();
    let mut final_loss = Real::NAN;
    for step in 0..steps {
        let mut picked = Vec::with_capacity(BATCH);
        while picked.len() < BATCH.min(corpus.train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&corpus.train[order[cursor]]);
            cursor += 1;
        }
        let (x, y) = batch_of(&picked)?;
        let mut tape = Tape::new();
        let pb = backbone.params.bind(&mut tape, true);
        let ph = head.bind(&mut tape, true);
        let xv = tape.constant(x);
        let feats = backbone.features(&mut tape, &pb, xv)?;
        let logits = linear(&mut tape, feats, ph.var("w"), ph.var("b"))?;
        let loss = tape.cross_entropy_with_logits(logits, &y)?;
        final_loss = tape.value(loss).item();
        if !final_loss.is_finite() {
            return Err(CoreError::NonFinite {
                what: "pretraining loss".into(),
                location: format!("step {step}"),
            });
        }
        let grads = tape.backward(loss)?;
        let gb = pb.gradients(&tape, &grads);
        let gh = ph.gradients(&tape, &grads);
        opt_b.update(&mut backbone.params, &gb, LR);
        opt_h.update(&mut head, &gh, LR);
    }
    if let Some(name) = backbone.params.first_non_finite() {
        return Err(CoreError::NonFinite {
            what: "pretrained backbone".into(),
            location: name.to_string(),
        });
    }
    let mut correct = 0;
    for chunk in corpus.test.chunks(256) {
        let refs: Vec<_> = chunk.iter().collect();
        let (x, y) = batch_of(&refs)?;
        let mut tape = Tape::no_grad();
        let pb = backbone.params.bind(&mut tape, false);
        let ph = head.bind(&mut tape, false);
        let xv = tape.constant(x);
        let feats = backbone.features(&mut tape, &pb, xv)?;
        let logits = linear(&mut tape, feats, ph.var("w"), ph.var("b"))?;
        correct += crate::metrics::count_correct(tape.value(logits), &y);
    }
    Ok(PretrainReport {
        backbone,
        final_loss,
        heldout_accuracy: correct as Real / corpus.test.len() as Real,
        chance: 1.0 / n as Real,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_dims_pad_to_head_multiple() {
        assert_eq!(TokenDims::new(16, 9, 4).d_token, 28);
        assert_eq!(
            TokenDims::new(16, 1, 4),
            TokenDims {
                d_feat: 16,
                d_score: 1,
                d_pad: 3,
                d_token: 20
            }
        );
    }
}
