//! Flat, typed run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use mocl_autodiff::{Real, REAL_BYTES};
use serde::{Deserialize, Serialize};

use crate::baselines::VariantKind;
use crate::error::{CoreError, Result};
use crate::importance::Allocation;
use crate::layers::{BackboneKind, ClassifierArch, ClassifierVariant};
use crate::meta_optimizer::MetaOptimizerConfig;
use crate::metrics::EvalSettings;
use crate::seeding::{derive_seed, SeedTag};
use crate::streams::{StreamKind, StreamSpec, ToySpec};
use crate::trainer::HyperParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: VariantKind,

    pub stream: StreamKind,
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub max_train_per_task: Option<usize>,
    pub max_test_per_task: Option<usize>,
    pub toy_channels: usize,
    pub toy_size: usize,
    pub toy_train_per_class: usize,
    pub toy_test_per_class: usize,
    pub toy_noise: Real,
    pub toy_max_shift: usize,

    pub classifier: ClassifierVariant,
    /// Filters per conv block; the variant's width when absent.
    pub filters: Option<usize>,

    pub k_shot: usize,
    pub q_train: usize,
    pub q_test: usize,
    pub alpha: Real,
    pub beta: Real,
    pub weight_decay: Real,
    pub warmup_steps: u64,
    pub decay_horizon: Option<u64>,
    pub grad_clip_norm: Real,
    pub keep_fraction: Real,
    pub batch_size: usize,
    pub query_size: Option<usize>,
    pub batches_per_step: usize,
    pub outer_steps_per_task: usize,
    pub bn_momentum: Real,
    pub transfer_lr: Real,

    pub allocation: Allocation,
    pub hard_mask: bool,
    pub dropout: Real,
    pub head_init_scale: Real,

    pub encoder: BackboneKind,
    pub encoder_checkpoint: Option<PathBuf>,
    pub pretrain_steps: usize,
    pub pretrain_classes: usize,
    pub pretrain_seed: u64,

    /// Support size per class at evaluation; `k_shot` when absent.
    pub eval_k: Option<usize>,
    /// Inference iterations at evaluation; `q_test` when absent.
    pub eval_q_test: Option<usize>,
    pub eval_cap: usize,

    pub data_dir: Option<PathBuf>,
    /// `"f64"` or `"f32"`; must match the build.
    pub precision: String,
    /// Writes the measured wall-clock time into metrics.json (breaks byte reproducibility).
    pub record_wallclock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::mnist(2);
        let toy = ToySpec::default();
        let meta = MetaOptimizerConfig::default();
        Self {
            seed: 0,
            variant: VariantKind::Proposed,
            stream: StreamKind::Toy,
            n_tasks: 3,
            classes_per_task: 2,
            max_train_per_task: None,
            max_test_per_task: None,
            toy_channels: toy.channels,
            toy_size: toy.size,
            toy_train_per_class: toy.train_per_class,
            toy_test_per_class: toy.test_per_class,
            toy_noise: toy.noise,
            toy_max_shift: toy.max_shift,
            classifier: ClassifierVariant::Small,
            filters: None,
            k_shot: hp.k_shot,
            q_train: hp.q_train,
            q_test: hp.q_test,
            alpha: hp.alpha,
            beta: hp.beta,
            weight_decay: hp.weight_decay,
            warmup_steps: hp.warmup_steps,
            decay_horizon: hp.decay_horizon,
            grad_clip_norm: hp.grad_clip_norm,
            keep_fraction: hp.keep_fraction,
            batch_size: hp.batch_size,
            query_size: hp.query_size,
            batches_per_step: hp.batches_per_step,
            outer_steps_per_task: hp.outer_steps_per_task,
            bn_momentum: hp.bn_momentum,
            transfer_lr: hp.transfer_lr,
            allocation: meta.allocation,
            hard_mask: meta.hard_mask,
            dropout: meta.dropout,
            head_init_scale: meta.head_init_scale,
            encoder: BackboneKind::Mlp100,
            encoder_checkpoint: None,
            pretrain_steps: 300,
            pretrain_classes: 10,
            pretrain_seed: 7,
            eval_k: None,
            eval_q_test: None,
            eval_cap: 100,
            data_dir: None,
            precision: build_precision().to_string(),
            record_wallclock: false,
        }
    }
}

/// Precision of this build.
pub fn build_precision() -> &'static str {
    if REAL_BYTES == 8 {
        "f64"
    } else {
        "f32"
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<config>".to_string());
            CoreError::Config { key, reason: msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != build_precision() {
            return Err(CoreError::config(
                "precision",
                format!(
                    "`{}` requested but this build computes in {}",
                    self.precision,
                    build_precision()
                ),
            ));
        }
        for (key, v) in [
            ("n_tasks", self.n_tasks),
            ("classes_per_task", self.classes_per_task),
            ("toy_channels", self.toy_channels),
            ("eval_cap", self.eval_cap),
            ("outer_steps_per_task", self.outer_steps_per_task),
            ("pretrain_classes", self.pretrain_classes),
        ] {
            if v == 0 {
                return Err(CoreError::config(key, "must be positive"));
            }
        }
        if self.toy_size < 2 {
            return Err(CoreError::config("toy_size", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::config("dropout", "must lie in [0, 1)"));
        }
        if self.filters == Some(0) {
            return Err(CoreError::config("filters", "must be positive"));
        }
        if self.eval_k == Some(0) {
            return Err(CoreError::config("eval_k", "must be positive"));
        }
        self.hyper_params().validate()
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            kind: self.stream,
            n_tasks: self.n_tasks,
            classes_per_task: self.classes_per_task,
            seed: derive_seed(self.seed, SeedTag::Stream),
            max_train_per_task: self.max_train_per_task,
            max_test_per_task: self.max_test_per_task,
            toy: ToySpec {
                channels: self.toy_channels,
                size: self.toy_size,
                train_per_class: self.toy_train_per_class,
                test_per_class: self.toy_test_per_class,
                noise: self.toy_noise,
                max_shift: self.toy_max_shift,
            },
        }
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            k_shot: self.k_shot,
            n_way: self.classes_per_task,
            q_train: self.q_train,
            q_test: self.q_test,
            alpha: self.alpha,
            beta: self.beta,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            decay_horizon: self.decay_horizon,
            grad_clip_norm: self.grad_clip_norm,
            keep_fraction: self.keep_fraction,
            batch_size: self.batch_size,
            query_size: self.query_size,
            batches_per_step: self.batches_per_step,
            outer_steps_per_task: self.outer_steps_per_task,
            bn_momentum: self.bn_momentum,
            transfer_lr: self.transfer_lr,
        }
    }

    pub fn meta_config(&self) -> MetaOptimizerConfig {
        MetaOptimizerConfig {
            allocation: self.allocation,
            hard_mask: self.hard_mask,
            keep_fraction: self.keep_fraction,
            dropout: self.dropout,
            head_init_scale: self.head_init_scale,
            ..MetaOptimizerConfig::default()
        }
    }

    pub fn classifier_arch(&self, image_shape: [usize; 3]) -> ClassifierArch {
        let arch = ClassifierArch::new(self.classifier, image_shape, self.classes_per_task);
        match self.filters {
            Some(f) => arch.with_filters(f),
            None => arch,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            k: self.eval_k.unwrap_or(self.k_shot),
            q_test: self.eval_q_test.unwrap_or(self.q_test),
            eval_cap: self.eval_cap,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig {
            seed: 9,
            hard_mask: true,
            filters: Some(8),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("seed = 1\nbetta = 0.1\n").unwrap_err();
        match err {
            CoreError::Config { key, .. } => assert_eq!(key, "betta"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn invalid_value_is_named() {
        let err = RunConfig::from_toml("q_train = 0\n").unwrap_err();
        assert!(
            matches!(err, CoreError::Config { ref key, .. } if key == "q_train"),
            "{err}"
        );
        let err = RunConfig::from_toml("precision = \"f16\"\n").unwrap_err();
        assert!(
            matches!(err, CoreError::Config { ref key, .. } if key == "precision"),
            "{err}"
        );
    }
}
