//! Variants run through the shared stream and evaluation pipeline: the proposed
//! method, first-order MAML, the transfer baseline and the component ablations.

use std::fmt;
use std::str::FromStr;

use mocl_autodiff::Real;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layers::{Backbone, ClassifierArch};
use crate::meta_optimizer::{
    FeatureExtractorKind, MetaOptimizer, MetaOptimizerConfig, TaskEncoderKind,
};
use crate::metrics::{avg_accuracy, bwt, evaluate_matrix, fwt, AccuracyMatrix, EvalSettings};
use crate::streams::Task;
use crate::trainer::{
    meta_train_stream, HyperParams, Learner, Method, Snapshot, StepLog, TrainerState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Proposed,
    Maml,
    Transfer,
    AblateTaskEncoder,
    AblateFeatureExtractor,
    AblateNoScores,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        Self::Proposed,
        Self::Maml,
        Self::Transfer,
        Self::AblateTaskEncoder,
        Self::AblateFeatureExtractor,
        Self::AblateNoScores,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::Maml => "maml",
            Self::Transfer => "transfer",
            Self::AblateTaskEncoder => "ablate_task_encoder",
            Self::AblateFeatureExtractor => "ablate_feature_extractor",
            Self::AblateNoScores => "ablate_no_scores",
        }
    }

    pub fn is_ablation(self) -> bool {
        matches!(
            self,
            Self::AblateTaskEncoder | Self::AblateFeatureExtractor | Self::AblateNoScores
        )
    }

    /// Whether the variant consumes a pretrained task-encoder backbone.
    pub fn needs_encoder(self) -> bool {
        matches!(
            self,
            Self::Proposed | Self::Transfer | Self::AblateFeatureExtractor | Self::AblateNoScores
        )
    }

    /// Meta-optimizer configuration of this variant derived from the proposed one.
    pub fn meta_config(self, base: &MetaOptimizerConfig) -> MetaOptimizerConfig {
        let mut cfg = base.clone();
        match self {
            Self::AblateTaskEncoder => cfg.task_encoder = TaskEncoderKind::Simple,
            Self::AblateFeatureExtractor => cfg.feature_extractor = FeatureExtractorKind::Linear,
            Self::AblateNoScores => {
                cfg.use_scores = false;
                cfg.hard_mask = false;
            }
            _ => {}
        }
        cfg
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::Unknown {
                what: "variant",
                name: s.to_string(),
            })
    }
}

/// Builds the learner of a variant. `encoder` is the frozen task-encoder backbone.
pub fn build_learner(
    kind: VariantKind,
    arch: &ClassifierArch,
    hp: &HyperParams,
    meta: &MetaOptimizerConfig,
    encoder: Option<Backbone>,
) -> Result<Learner> {
    let method = match kind {
        VariantKind::Maml => Method::Maml,
        VariantKind::Transfer => Method::Transfer(encoder.ok_or_else(|| {
            CoreError::Precondition(
                "the transfer baseline needs a pretrained encoder checkpoint".into(),
            )
        })?),
        _ => {
            let cfg = kind.meta_config(meta);
            let backbone = if cfg.task_encoder == TaskEncoderKind::Backbone {
                encoder
            } else {
                None
            };
            Method::Meta(Box::new(MetaOptimizer::new(
                cfg,
                arch.weight_layout(),
                arch.input_shape,
                backbone,
            )?))
        }
    };
    Learner::new(arch.clone(), method, hp.clone())
}

pub struct RunResult {
    pub kind: VariantKind,
    pub state: TrainerState,
    pub snapshots: Vec<Snapshot>,
    pub log: Vec<StepLog>,
    pub matrix: AccuracyMatrix,
    pub avg_accuracy: Real,
    pub bwt: Option<Real>,
    pub fwt: Option<Real>,
}

/// Trains a learner through the stream and evaluates every snapshot on every task.
pub fn run_learner(
    kind: VariantKind,
    learner: &Learner,
    tasks: &[Task],
    seed: u64,
    eval: &EvalSettings,
) -> Result<RunResult> {
    let run = meta_train_stream(learner, tasks, seed)?;
    let matrix = evaluate_matrix(learner, &run.snapshots, tasks, eval)?;
    Ok(RunResult {
        kind,
        avg_accuracy: avg_accuracy(&matrix),
        bwt: bwt(&matrix).ok(),
        fwt: fwt(&matrix).ok(),
        matrix,
        state: run.state,
        snapshots: run.snapshots,
        log: run.log,
    })
}

pub struct VariantInputs<'a> {
    pub arch: &'a ClassifierArch,
    pub hp: &'a HyperParams,
    pub meta: &'a MetaOptimizerConfig,
    pub encoder: Option<&'a Backbone>,
    pub tasks: &'a [Task],
    pub seed: u64,
    pub eval: &'a EvalSettings,
}

pub fn run_variant(kind: VariantKind, inputs: &VariantInputs<'_>) -> Result<RunResult> {
    let learner = build_learner(
        kind,
        inputs.arch,
        inputs.hp,
        inputs.meta,
        inputs.encoder.cloned(),
    )?;
    run_learner(kind, &learner, inputs.tasks, inputs.seed, inputs.eval)
}

pub fn run_maml(inputs: &VariantInputs<'_>) -> Result<RunResult> {
    run_variant(VariantKind::Maml, inputs)
}

pub fn run_transfer(inputs: &VariantInputs<'_>) -> Result<RunResult> {
    run_variant(VariantKind::Transfer, inputs)
}

pub fn run_ablation(kind: VariantKind, inputs: &VariantInputs<'_>) -> Result<RunResult> {
    if !kind.is_ablation() {
        return Err(CoreError::Unknown {
            what: "ablation",
            name: kind.to_string(),
        });
    }
    run_variant(kind, inputs)
}
