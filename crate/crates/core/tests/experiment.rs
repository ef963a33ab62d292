//! Checkpoints, seeding, run directories and configuration errors.

use std::fs;
use std::path::{Path, PathBuf};

use mocl_autodiff::{Real, REAL_BYTES};
use mocl_core::baselines::VariantKind;
use mocl_core::experiment::checkpoint::{
    encoder_from_checkpoint, snapshot_from_checkpoint, snapshot_to_checkpoint,
    state_from_checkpoint, state_to_checkpoint, Checkpoint,
};
use mocl_core::experiment::config::RunConfig;
use mocl_core::experiment::run::{
    ablate, build_run_learner, eval, format_report, load_snapshots, load_tasks, report,
    resolve_encoder, sweep_k, train, Metrics,
};
use mocl_core::seeding::{derive_indexed, derive_seed, rng_for, SeedTag};
use mocl_core::streams::StreamKind;
use mocl_core::CoreError;
use rand::{Rng, RngCore};

fn tiny(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        n_tasks: 2,
        toy_size: 8,
        toy_train_per_class: 12,
        toy_test_per_class: 12,
        filters: Some(2),
        k_shot: 2,
        q_train: 1,
        q_test: 2,
        query_size: Some(4),
        outer_steps_per_task: 2,
        warmup_steps: 1,
        pretrain_steps: 0,
        eval_cap: 16,
        ..RunConfig::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

#[test]
fn seed_derivation_matches_the_reference_mix() {
    for master in [0u64, 1, 42, u64::MAX] {
        for (tag, name) in [
            (SeedTag::Stream, "stream"),
            (SeedTag::Episode, "episode"),
            (SeedTag::Init, "init"),
            (SeedTag::Dropout, "dropout"),
            (SeedTag::Eval, "eval"),
        ] {
            let want = splitmix(master ^ splitmix(fnv1a(name)));
            assert_eq!(derive_seed(master, tag), want);
            assert_eq!(derive_indexed(master, tag, 3), splitmix(want ^ splitmix(4)));
        }
    }
    // Known value of the FNV-1a offset basis mix.
    assert_eq!(fnv1a(""), 0xcbf29ce484222325);
    assert_eq!(splitmix(0), 0xE220A8397B1DCDAF);
}

#[test]
fn tagged_streams_repeat_and_differ() {
    let draws = |t| {
        let mut r = rng_for(7, t);
        (0..100).map(|_| r.next_u64()).collect::<Vec<_>>()
    };
    let all: Vec<Vec<u64>> = SeedTag::ALL.iter().map(|&t| draws(t)).collect();
    for (i, &t) in SeedTag::ALL.iter().enumerate() {
        assert_eq!(draws(t), all[i]);
        for j in i + 1..all.len() {
            assert_ne!(all[i], all[j]);
        }
    }
    let mut other = rng_for(8, SeedTag::Stream);
    assert_ne!(other.next_u64(), all[0][0]);
}

#[test]
fn dropout_setting_does_not_shift_episodes() {
    let ids = |dropout: Real| {
        let cfg = RunConfig { dropout, ..tiny(3) };
        let (data, tasks) = load_tasks(&cfg).unwrap();
        let enc = resolve_encoder(&cfg, data.image_shape).unwrap();
        let l = build_run_learner(&cfg, data.image_shape, enc).unwrap();
        let mut st = l.init_state(cfg.seed).unwrap();
        let mut out = Vec::new();
        for _ in 0..4 {
            let b = l.sample_batches(&mut st, &tasks[0]).unwrap();
            l.outer_step(&mut st, &b, 4).unwrap();
            out.push(b[0].support_ids.clone());
            out.push(b[0].query_ids.clone());
        }
        out
    };
    assert_eq!(ids(0.2), ids(0.0));
}

#[test]
fn runs_are_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny(4);
    let ma = train(&cfg, a.path()).unwrap();
    let mb = train(&cfg, b.path()).unwrap();
    assert_eq!(ma, mb);
    for f in [
        "metrics.json",
        "accuracy_matrix.csv",
        "checkpoint.ckpt",
        "train_log.jsonl",
        "snapshots/task_1.ckpt",
        "weights/task_0.csv",
    ] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let other = tempfile::tempdir().unwrap();
    train(&tiny(5), other.path()).unwrap();
    assert_ne!(
        read(&a.path().join("checkpoint.ckpt")),
        read(&other.path().join("checkpoint.ckpt"))
    );
}

#[test]
fn run_directory_layout() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(6);
    let m = train(&cfg, d.path()).unwrap();
    assert_eq!((m.m, m.k, m.per_task.len()), (2, 2, 2));
    assert_eq!(m.wallclock_s, None);
    let v: serde_json::Value =
        serde_json::from_slice(&read(&d.path().join("metrics.json"))).unwrap();
    for key in [
        "variant",
        "seed",
        "M",
        "K",
        "avg_accuracy",
        "bwt",
        "fwt",
        "per_task",
        "wallclock_s",
    ] {
        assert!(v.get(key).is_some(), "{key}");
    }
    let csv = String::from_utf8(read(&d.path().join("accuracy_matrix.csv"))).unwrap();
    let rows: Vec<Vec<Real>> = csv
        .lines()
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows
        .iter()
        .all(|r| r.len() == 2 && r.iter().all(|v| (0.0..=1.0).contains(v))));
    assert_eq!(rows[1][0], m.per_task[0].r#final);
    let log = String::from_utf8(read(&d.path().join("train_log.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 4);
    let weights = String::from_utf8(read(&d.path().join("weights/task_1.csv"))).unwrap();
    let (_, tasks) = load_tasks(&cfg).unwrap();
    let r = cfg
        .classifier_arch(tasks[0].train_pool[0].image.shape().try_into().unwrap())
        .weight_layout()
        .total();
    assert_eq!(weights.lines().count(), r + 1);
    assert!(weights.starts_with("index,layer,value\n"));
    assert_eq!(
        RunConfig::load(&d.path().join("resolved_config.toml")).unwrap(),
        cfg
    );
    assert!(d.path().join("encoder.ckpt").exists());
    assert_eq!(load_snapshots(d.path(), 2).unwrap().len(), 2);

    let mut timed = tiny(6);
    timed.record_wallclock = true;
    let t = tempfile::tempdir().unwrap();
    assert!(train(&timed, t.path()).unwrap().wallclock_s.unwrap() >= 0.0);
}

#[test]
fn eval_of_a_finished_run_reproduces_its_metrics() {
    let d = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    train(&tiny(7), d.path()).unwrap();
    eval(d.path(), out.path(), None, None).unwrap();
    for f in ["metrics.json", "accuracy_matrix.csv"] {
        assert_eq!(read(&d.path().join(f)), read(&out.path().join(f)), "{f}");
    }
    let k1 = eval(d.path(), &out.path().join("k1"), Some(1), Some(3)).unwrap();
    assert_eq!(k1.k, 1);
}

#[test]
fn trainer_state_round_trips_through_a_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        variant: VariantKind::Maml,
        ..tiny(8)
    };
    train(&cfg, d.path()).unwrap();
    let bytes = read(&d.path().join("checkpoint.ckpt"));
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let mut st = state_from_checkpoint(&ck, cfg.weight_decay).unwrap();
    assert_eq!(
        state_to_checkpoint("maml", &st, ck.metadata.clone()).to_bytes(),
        bytes
    );
    assert_eq!(st.w_writes, 0);
    assert!(st.opt_w.is_some());

    // Resume reproduces the uninterrupted continuation.
    let (data, tasks) = load_tasks(&cfg).unwrap();
    let l = build_run_learner(&cfg, data.image_shape, None).unwrap();
    let mut fresh = state_from_checkpoint(&ck, cfg.weight_decay).unwrap();
    for s in [&mut st, &mut fresh] {
        let b = l.sample_batches(s, &tasks[1]).unwrap();
        l.outer_step(s, &b, 6).unwrap();
    }
    assert_eq!(
        state_to_checkpoint("maml", &st, ck.metadata.clone()).to_bytes(),
        state_to_checkpoint("maml", &fresh, ck.metadata.clone()).to_bytes()
    );
    assert_eq!(
        st.episode_rng.random::<u64>(),
        fresh.episode_rng.random::<u64>()
    );
}

#[test]
fn snapshot_round_trip_preserves_forward_outputs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(9);
    train(&cfg, d.path()).unwrap();
    let (data, tasks) = load_tasks(&cfg).unwrap();
    let enc = encoder_from_checkpoint(&Checkpoint::load(&d.path().join("encoder.ckpt")).unwrap())
        .unwrap();
    assert_eq!(
        Some(enc.clone()),
        resolve_encoder(&cfg, data.image_shape).unwrap()
    );
    let l = build_run_learner(&cfg, data.image_shape, Some(enc)).unwrap();
    let snaps = load_snapshots(d.path(), 2).unwrap();
    let reloaded = snapshot_from_checkpoint(
        &Checkpoint::from_bytes(&snapshot_to_checkpoint("proposed", &snaps[1]).to_bytes()).unwrap(),
    );
    assert_eq!(reloaded, snaps[1]);
    let ep = mocl_core::streams::sample_episode(
        &tasks[0],
        2,
        6,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1),
    )
    .unwrap();
    let a = l.adapt_for_inference(&snaps[1], &ep, 2).unwrap();
    let b = l.adapt_for_inference(&reloaded, &ep, 2).unwrap();
    assert!(l
        .logits(&a, &ep.query_x)
        .unwrap()
        .bit_eq(&l.logits(&b, &ep.query_x).unwrap()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let mut ck = Checkpoint::new("proposed");
    ck.tensors
        .push(("t".into(), mocl_autodiff::Tensor::vector(vec![1.0, 2.0])));
    let good = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&good).is_ok());
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&good[..good.len() - 3]).is_err());
    let mut long = good.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
    let other = if REAL_BYTES == 8 { 4 } else { 8 };
    let foreign = Checkpoint {
        precision: other,
        ..ck
    };
    let err = Checkpoint::from_bytes(&foreign.to_bytes()).unwrap_err();
    assert!(err.to_string().contains(&format!("{other}-byte")), "{err}");
}

#[test]
fn report_summarizes_seeds() {
    let root = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = (0..3).map(|s| root.path().join(format!("s{s}"))).collect();
    let metrics: Vec<Metrics> = dirs
        .iter()
        .enumerate()
        .map(|(s, d)| train(&tiny(s as u64), d).unwrap())
        .collect();
    let rows = report(&dirs).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].seeds, vec![0, 1, 2]);
    let mean = metrics.iter().map(|m| m.avg_accuracy).sum::<Real>() / 3.0;
    assert!((rows[0].avg_accuracy.mean - mean).abs() < 1e-12);
    assert_eq!(rows[0].bwt.unwrap().n, 3);
    let text = format_report(&rows);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("proposed,2,3,"));
    assert!(report(&[]).is_err());
    assert!(report(&[root.path().join("missing")]).is_err());
}

#[test]
fn k_sweep_writes_one_row_per_k() {
    let d = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        toy_train_per_class: 24,
        toy_test_per_class: 24,
        outer_steps_per_task: 1,
        ..tiny(10)
    };
    let rows = sweep_k(&cfg, d.path()).unwrap();
    assert_eq!(
        rows.iter().map(|m| m.k).collect::<Vec<_>>(),
        vec![1, 5, 10, 20]
    );
    let csv = fs::read_to_string(d.path().join("sweep_k.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(d.path().join("k20/metrics.json").exists());
}

fn config_key(e: CoreError) -> String {
    match e {
        CoreError::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn configuration_errors_name_the_key() {
    assert_eq!(
        config_key(RunConfig::from_toml("sed = 3\n").unwrap_err()),
        "sed"
    );
    assert_eq!(
        config_key(RunConfig::from_toml("k_shot = 0\n").unwrap_err()),
        "k_shot"
    );
    assert_eq!(
        config_key(RunConfig::from_toml("dropout = 1.5\n").unwrap_err()),
        "dropout"
    );
    let d = tempfile::tempdir().unwrap();
    let mnist = RunConfig {
        stream: StreamKind::SplitMnist,
        ..tiny(0)
    };
    assert_eq!(config_key(train(&mnist, d.path()).unwrap_err()), "data_dir");
    let transfer = RunConfig {
        variant: VariantKind::Transfer,
        ..tiny(0)
    };
    assert_eq!(
        config_key(train(&transfer, d.path()).unwrap_err()),
        "encoder_checkpoint"
    );
    assert!(matches!(
        ablate(&tiny(0), d.path()),
        Err(CoreError::Unknown { .. })
    ));
    let toml = RunConfig {
        variant: VariantKind::AblateNoScores,
        ..tiny(0)
    }
    .to_toml();
    assert!(toml.contains("variant = \"ablate_no_scores\""));
}
