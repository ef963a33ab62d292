//! Run directories: training, evaluation, reports and the K sweep.
//!
//! A run directory holds:
//!
//! ```text
//! resolved_config.toml   exact configuration of the run
//! train_log.jsonl        one record per outer step
//! encoder.ckpt           frozen task-encoder backbone (variants that use one)
//! snapshots/task_<m>.ckpt
//! weights/task_<m>.csv   W after training on task m
//! checkpoint.ckpt        final trainer state
//! accuracy_matrix.csv
//! metrics.json
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mocl_autodiff::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{
    encoder_from_checkpoint, encoder_to_checkpoint, snapshot_from_checkpoint,
    snapshot_to_checkpoint, state_to_checkpoint, Checkpoint,
};
use super::config::RunConfig;
use crate::baselines::{build_learner, VariantKind};
use crate::error::{CoreError, Result};
use crate::layers::{Backbone, WeightLayout};
use crate::meta_optimizer::{pretrain_task_encoder, PretrainReport};
use crate::metrics::{avg_accuracy, bwt, evaluate_matrix, fwt, AccuracyMatrix, EvalSettings};
use crate::streams::{
    build_stream, load_dataset, toy_dataset, DataSplits, StreamKind, Task, ToySpec,
};
use crate::trainer::{Learner, Snapshot};

pub const SWEEP_K: [usize; 4] = [1, 5, 10, 20];

const PRETRAIN_TRAIN_PER_CLASS: usize = 100;
const PRETRAIN_TEST_PER_CLASS: usize = 30;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CoreError::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CoreError::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

/// Loads the configured dataset and cuts it into the task stream.
pub fn load_tasks(cfg: &RunConfig) -> Result<(DataSplits, Vec<Task>)> {
    let spec = cfg.stream_spec();
    let data = match spec.kind {
        StreamKind::Toy => toy_dataset(&spec.toy, spec.n_tasks * spec.classes_per_task, spec.seed)?,
        kind => {
            let dir = cfg.data_dir.as_deref().ok_or_else(|| {
                CoreError::config(
                    "data_dir",
                    format!(
                        "the {} stream reads dataset files; pass --data",
                        kind.name()
                    ),
                )
            })?;
            load_dataset(kind, dir)?
        }
    };
    let tasks = build_stream(&spec, &data)?;
    Ok((data, tasks))
}

/// Synthetic labelled corpus for encoder pretraining, disjoint in seed from every stream.
pub fn pretrain_corpus(cfg: &RunConfig, image_shape: [usize; 3]) -> Result<DataSplits> {
    if image_shape[1] != image_shape[2] {
        return Err(CoreError::Precondition(format!(
            "pretraining corpus needs square images, got {image_shape:?}"
        )));
    }
    let toy = ToySpec {
        channels: image_shape[0],
        size: image_shape[1],
        train_per_class: PRETRAIN_TRAIN_PER_CLASS,
        test_per_class: PRETRAIN_TEST_PER_CLASS,
        noise: cfg.toy_noise,
        max_shift: cfg.toy_max_shift,
    };
    toy_dataset(&toy, cfg.pretrain_classes, cfg.pretrain_seed)
}

fn image_shape_of(cfg: &RunConfig) -> Result<[usize; 3]> {
    match cfg.stream {
        StreamKind::Toy => Ok([cfg.toy_channels, cfg.toy_size, cfg.toy_size]),
        _ => Ok(load_tasks(cfg)?.0.image_shape),
    }
}

/// Pretrains the configured backbone and writes it as an encoder checkpoint.
pub fn pretrain_encoder(cfg: &RunConfig, out: &Path) -> Result<PretrainReport> {
    let shape = image_shape_of(cfg)?;
    let corpus = pretrain_corpus(cfg, shape)?;
    let report =
        pretrain_task_encoder(cfg.encoder, &corpus, cfg.pretrain_steps, cfg.pretrain_seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let meta = serde_json::json!({
        "steps": cfg.pretrain_steps,
        "classes": cfg.pretrain_classes,
        "seed": cfg.pretrain_seed,
        "final_loss": report.final_loss,
        "heldout_accuracy": report.heldout_accuracy,
    });
    encoder_to_checkpoint(&report.backbone, meta).save(out)?;
    Ok(report)
}

/// The frozen backbone a variant consumes, if any.
///
/// Loaded from `encoder_checkpoint` when set. Otherwise the meta-learned variants
/// pretrain one inline (or draw a random one when `pretrain_steps == 0`); the
/// transfer baseline refuses to run without a checkpoint.
pub fn resolve_encoder(cfg: &RunConfig, image_shape: [usize; 3]) -> Result<Option<Backbone>> {
    if !cfg.variant.needs_encoder() {
        return Ok(None);
    }
    let backbone = match &cfg.encoder_checkpoint {
        Some(path) => encoder_from_checkpoint(&Checkpoint::load(path)?)?,
        None if cfg.variant == VariantKind::Transfer => {
            return Err(CoreError::config(
                "encoder_checkpoint",
                "the transfer baseline needs a pretrained encoder; run pretrain-encoder first",
            ))
        }
        None if cfg.pretrain_steps == 0 => Backbone::new(
            cfg.encoder,
            image_shape,
            &mut ChaCha8Rng::seed_from_u64(cfg.pretrain_seed),
        ),
        None => {
            let corpus = pretrain_corpus(cfg, image_shape)?;
            pretrain_task_encoder(cfg.encoder, &corpus, cfg.pretrain_steps, cfg.pretrain_seed)?
                .backbone
        }
    };
    if backbone.input_shape != image_shape {
        return Err(CoreError::Precondition(format!(
            "encoder expects images {:?}, stream provides {image_shape:?}",
            backbone.input_shape
        )));
    }
    Ok(Some(backbone))
}

pub fn build_run_learner(
    cfg: &RunConfig,
    image_shape: [usize; 3],
    encoder: Option<Backbone>,
) -> Result<Learner> {
    build_learner(
        cfg.variant,
        &cfg.classifier_arch(image_shape),
        &cfg.hyper_params(),
        &cfg.meta_config(),
        encoder,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    /// Accuracy right after training on this task.
    pub just_trained: Real,
    /// Accuracy after the whole stream.
    pub r#final: Real,
}

/// Contents of metrics.json.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub variant: VariantKind,
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub avg_accuracy: Real,
    pub bwt: Option<Real>,
    pub fwt: Option<Real>,
    pub per_task: Vec<TaskMetrics>,
    pub wallclock_s: Option<f64>,
}

impl Metrics {
    pub fn from_matrix(
        variant: VariantKind,
        seed: u64,
        k: usize,
        r: &AccuracyMatrix,
        wallclock_s: Option<f64>,
    ) -> Self {
        let m = r.size();
        Self {
            variant,
            seed,
            m,
            k,
            avg_accuracy: avg_accuracy(r),
            bwt: bwt(r).ok(),
            fwt: fwt(r).ok(),
            per_task: (0..m)
                .map(|j| TaskMetrics {
                    task: j,
                    just_trained: r.values[j][j],
                    r#final: r.values[m - 1][j],
                })
                .collect(),
            wallclock_s,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

fn weights_csv(layout: &WeightLayout, w: &[Real]) -> String {
    let mut out = String::from("index,layer,value\n");
    for (i, v) in w.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{v:e}", layout.layer_of(i));
    }
    out
}

fn snapshot_path(dir: &Path, m: usize) -> PathBuf {
    dir.join("snapshots").join(format!("task_{m}.ckpt"))
}

/// Trains the configured variant into `dir` and evaluates it there.
pub fn train(cfg: &RunConfig, dir: &Path) -> Result<Metrics> {
    cfg.validate()?;
    let start = Instant::now();
    create_dir(&dir.join("snapshots"))?;
    create_dir(&dir.join("weights"))?;
    write_file(&dir.join("resolved_config.toml"), cfg.to_toml())?;

    let (data, tasks) = load_tasks(cfg)?;
    let encoder = resolve_encoder(cfg, data.image_shape)?;
    if let Some(e) = &encoder {
        encoder_to_checkpoint(e, serde_json::json!({ "source": cfg.encoder_checkpoint }))
            .save(&dir.join("encoder.ckpt"))?;
    }
    let learner = build_run_learner(cfg, data.image_shape, encoder)?;

    let log_path = dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).map_err(|e| CoreError::io(&log_path, e))?,
    );
    let mut log_err = None;
    let mut state = learner.init_state(cfg.seed)?;
    let snapshots = learner.train_stream(&mut state, &tasks, |rec| {
        if log_err.is_none() {
            let line = serde_json::to_string(rec).expect("step log serializes");
            if let Err(e) = writeln!(log, "{line}") {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(CoreError::io(&log_path, e));
    }
    log.flush().map_err(|e| CoreError::io(&log_path, e))?;

    let layout = learner.arch.weight_layout();
    for (m, snap) in snapshots.iter().enumerate() {
        snapshot_to_checkpoint(cfg.variant.as_str(), snap).save(&snapshot_path(dir, m))?;
        if !snap.w.is_empty() {
            write_file(
                &dir.join("weights").join(format!("task_{m}.csv")),
                weights_csv(&layout, &snap.w),
            )?;
        }
    }
    let meta = serde_json::json!({ "seed": cfg.seed, "tasks": tasks.len() });
    state_to_checkpoint(cfg.variant.as_str(), &state, meta).save(&dir.join("checkpoint.ckpt"))?;

    let eval = cfg.eval_settings();
    let matrix = evaluate_matrix(&learner, &snapshots, &tasks, &eval)?;
    let wall = cfg.record_wallclock.then(|| start.elapsed().as_secs_f64());
    write_results(dir, cfg, &eval, &matrix, wall)
}

fn write_results(
    dir: &Path,
    cfg: &RunConfig,
    eval: &EvalSettings,
    matrix: &AccuracyMatrix,
    wall: Option<f64>,
) -> Result<Metrics> {
    let metrics = Metrics::from_matrix(cfg.variant, cfg.seed, eval.k, matrix, wall);
    write_file(&dir.join("accuracy_matrix.csv"), matrix.to_csv())?;
    write_file(&dir.join("metrics.json"), metrics.to_json())?;
    Ok(metrics)
}

/// Loads the snapshots of a finished run.
pub fn load_snapshots(dir: &Path, m: usize) -> Result<Vec<Snapshot>> {
    (0..m)
        .map(|i| Checkpoint::load(&snapshot_path(dir, i)).map(|c| snapshot_from_checkpoint(&c)))
        .collect()
}

/// Re-evaluates the snapshots in `run_dir`, writing matrix and metrics to `out`.
///
/// `k` and `q_test` override the evaluation support size and inference iterations.
pub fn eval(
    run_dir: &Path,
    out: &Path,
    k: Option<usize>,
    q_test: Option<usize>,
) -> Result<Metrics> {
    let mut cfg = RunConfig::load(&run_dir.join("resolved_config.toml"))?;
    if k.is_some() {
        cfg.eval_k = k;
    }
    if q_test.is_some() {
        cfg.eval_q_test = q_test;
    }
    cfg.validate()?;
    let start = Instant::now();
    let (data, tasks) = load_tasks(&cfg)?;
    let encoder_path = run_dir.join("encoder.ckpt");
    let encoder = if encoder_path.exists() {
        Some(encoder_from_checkpoint(&Checkpoint::load(&encoder_path)?)?)
    } else {
        None
    };
    let learner = build_run_learner(&cfg, data.image_shape, encoder)?;
    let snapshots = load_snapshots(run_dir, tasks.len())?;
    let settings = cfg.eval_settings();
    let matrix = evaluate_matrix(&learner, &snapshots, &tasks, &settings)?;
    create_dir(out)?;
    let wall = cfg.record_wallclock.then(|| start.elapsed().as_secs_f64());
    write_results(out, &cfg, &settings, &matrix, wall)
}

/// Trains an ablation variant.
pub fn ablate(cfg: &RunConfig, dir: &Path) -> Result<Metrics> {
    if !cfg.variant.is_ablation() {
        return Err(CoreError::Unknown {
            what: "ablation",
            name: cfg.variant.to_string(),
        });
    }
    train(cfg, dir)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Real,
    pub std: Real,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[Real]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as Real;
        let mean = xs.iter().sum::<Real>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: xs.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: VariantKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub seeds: Vec<u64>,
    pub avg_accuracy: MeanStd,
    pub bwt: Option<MeanStd>,
    pub fwt: Option<MeanStd>,
}

/// Groups runs by (variant, K) and summarizes each metric.
pub fn report(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if run_dirs.is_empty() {
        return Err(CoreError::Precondition(
            "report needs at least one run directory".into(),
        ));
    }
    let mut all = Vec::new();
    for dir in run_dirs {
        let path = dir.join("metrics.json");
        let m: Metrics = serde_json::from_str(&read_file(&path)?)
            .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
        all.push(m);
    }
    let mut keys: Vec<(VariantKind, usize)> = Vec::new();
    for m in &all {
        if !keys.contains(&(m.variant, m.k)) {
            keys.push((m.variant, m.k));
        }
    }
    Ok(keys
        .into_iter()
        .map(|(variant, k)| {
            let group: Vec<&Metrics> = all
                .iter()
                .filter(|m| m.variant == variant && m.k == k)
                .collect();
            let pick = |f: fn(&Metrics) -> Option<Real>| -> Option<MeanStd> {
                let xs: Option<Vec<Real>> = group.iter().map(|m| f(m)).collect();
                xs.and_then(|xs| MeanStd::of(&xs))
            };
            ReportRow {
                variant,
                k,
                seeds: group.iter().map(|m| m.seed).collect(),
                avg_accuracy: pick(|m| Some(m.avg_accuracy)).expect("non-empty group"),
                bwt: pick(|m| m.bwt),
                fwt: pick(|m| m.fwt),
            }
        })
        .collect())
}

pub fn write_report_json(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(rows).expect("report serializes");
    json.push('\n');
    write_file(path, json)
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let cell = |v: Option<MeanStd>| match v {
        Some(s) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std),
        None => "n/a".to_string(),
    };
    let mut out = String::from("variant,K,runs,avg_accuracy,bwt,fwt\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant,
            r.k,
            r.seeds.len(),
            cell(Some(r.avg_accuracy)),
            cell(r.bwt),
            cell(r.fwt)
        );
    }
    out
}

/// Trains and evaluates once per K in [`SWEEP_K`], each in `dir/k<K>`.
/// Writes `dir/sweep_k.csv` with one row per K.
pub fn sweep_k(cfg: &RunConfig, dir: &Path) -> Result<Vec<Metrics>> {
    create_dir(dir)?;
    let mut rows = Vec::new();
    let mut csv = String::from("K,avg_accuracy,bwt,fwt\n");
    for k in SWEEP_K {
        let run = RunConfig {
            k_shot: k,
            eval_k: Some(k),
            ..cfg.clone()
        };
        let m = train(&run, &dir.join(format!("k{k}")))?;
        let opt = |v: Option<Real>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{k},{},{},{}", m.avg_accuracy, opt(m.bwt), opt(m.fwt));
        rows.push(m);
    }
    write_file(&dir.join("sweep_k.csv"), csv)?;
    Ok(rows)
}
