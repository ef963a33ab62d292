//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.
//!
//! Criteria 7–10 share one desk-scale protocol: a seeded 3-task toy stream
//! (300 training images per task), the small classifier, 200 outer steps per
//! task, K = 5, Q = 3, seeds 0–2, and one encoder pretrained up front.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mocl_autodiff::{
    finite_difference_check, BatchStats, DropoutKey, NormMode, Real, Tape, Tensor, Var,
};
use mocl_core::baselines::VariantKind;
use mocl_core::experiment::checkpoint::{
    snapshot_from_checkpoint, snapshot_to_checkpoint, Checkpoint,
};
use mocl_core::experiment::config::RunConfig;
use mocl_core::experiment::run::{
    build_run_learner, load_tasks, pretrain_encoder, resolve_encoder, train, Metrics,
};
use mocl_core::importance::{
    apply_mask, normalize_and_threshold, reassemble, tokenize, Allocation, KEEP_FRACTION,
};
use mocl_core::layers::{BnMode, ClassifierArch, KernelShape, WeightLayout};
use mocl_core::meta_optimizer::{
    MetaOptimizer, MetaOptimizerConfig, TaskEncoderKind, UpdateContext, UpdateRule,
};
use mocl_core::metrics::{avg_accuracy, bwt, fwt, AccuracyMatrix};
use mocl_core::params::{Bound, ParamSet};
use mocl_core::streams::{sample_episode, Episode};
use mocl_core::trainer::{adapt_and_optimize, compute_scores, meta_train_stream, AdaptOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

const FD_EPS: Real = 1e-5;
const FD_TOL: Real = 1e-4;

fn weighted_sum(t: &mut Tape, v: Var, rng: &mut ChaCha8Rng) -> mocl_autodiff::Result<Var> {
    let w = t.constant(random(rng, &t.shape(v).to_vec()));
    let p = t.mul(v, w)?;
    t.sum(p)
}

type Probe = Box<dyn Fn(&mut Tape, &[Var]) -> mocl_autodiff::Result<Var>>;

/// One randomized instance of every primitive.
fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Probe)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = |r: &mut ChaCha8Rng, lo: usize, hi: usize| r.random_range(lo..=hi);
    let (m, k, n) = (d(&mut r, 1, 5), d(&mut r, 1, 5), d(&mut r, 2, 5));
    let (b, c, o, hw) = (
        d(&mut r, 1, 2),
        d(&mut r, 1, 3),
        d(&mut r, 1, 3),
        d(&mut r, 3, 6),
    );
    let kk = if r.random() { 3 } else { 1 };
    let (stride, pad) = (d(&mut r, 1, 2), d(&mut r, 0, 1));
    let ws = r.random::<u64>();
    let running = BatchStats {
        mean: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| r.random_range(0.5..2.0)).collect(),
    };
    let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
    let key = DropoutKey {
        seed: ws,
        counter: 3,
    };
    let axis = d(&mut r, 0, 2);
    let mk = move |f: Box<dyn Fn(&mut Tape, &[Var]) -> mocl_autodiff::Result<Var>>| -> Probe {
        Box::new(move |t: &mut Tape, v: &[Var]| {
            let y = f(t, v)?;
            weighted_sum(t, y, &mut ChaCha8Rng::seed_from_u64(ws))
        })
    };
    let shape3 = [m, k, n];
    let mut cases: Vec<(&'static str, Vec<Tensor>, Probe)> = vec![
        (
            "matmul",
            vec![random(&mut r, &[m, k]), random(&mut r, &[k, n])],
            mk(Box::new(|t, v| t.matmul(v[0], v[1]))),
        ),
        (
            "conv2d",
            vec![
                random(&mut r, &[b, c, hw, hw]),
                random(&mut r, &[o, c, kk, kk]),
            ],
            mk(Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad))),
        ),
        (
            "maxpool2x2",
            vec![random(&mut r, &[b, c, hw, hw])],
            mk(Box::new(|t, v| t.maxpool2x2(v[0]))),
        ),
        (
            "batchnorm (batch)",
            vec![
                random(&mut r, &[b + 1, c, 2, 2]),
                random(&mut r, &[c]),
                random(&mut r, &[c]),
            ],
            mk(Box::new(|t, v| {
                Ok(t.batchnorm(v[0], v[1], v[2], NormMode::Batch, 1e-5)?.0)
            })),
        ),
        (
            "batchnorm (running)",
            vec![
                random(&mut r, &[b, c, 2, 2]),
                random(&mut r, &[c]),
                random(&mut r, &[c]),
            ],
            mk(Box::new(move |t, v| {
                Ok(
                    t.batchnorm(v[0], v[1], v[2], NormMode::Running(&running), 1e-5)?
                        .0,
                )
            })),
        ),
        (
            "layer_norm",
            vec![
                random(&mut r, &[m, n]),
                random(&mut r, &[n]),
                random(&mut r, &[n]),
            ],
            mk(Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        ),
        (
            "leaky_relu",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.leaky_relu(v[0], 0.01))),
        ),
        (
            "gelu",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.gelu(v[0]))),
        ),
        (
            "tanh",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.tanh(v[0]))),
        ),
        (
            "scale",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.scale(v[0], -1.7))),
        ),
        (
            "add",
            vec![random(&mut r, &[m, n]), random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.add(v[0], v[1]))),
        ),
        (
            "sub",
            vec![random(&mut r, &[m, n]), random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.sub(v[0], v[1]))),
        ),
        (
            "mul",
            vec![random(&mut r, &[m, n]), random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.mul(v[0], v[1]))),
        ),
        (
            "add_bias",
            vec![random(&mut r, &shape3), random(&mut r, &[shape3[axis]])],
            mk(Box::new(move |t, v| t.add_bias(v[0], v[1], axis))),
        ),
        (
            "concat",
            vec![random(&mut r, &[m, n]), random(&mut r, &[m, k])],
            mk(Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ),
        (
            "mean",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.mean(v[0], 1))),
        ),
        (
            "softmax",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.softmax(v[0], 1))),
        ),
        (
            "reshape",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(move |t, v| t.reshape(v[0], &[n, m]))),
        ),
        (
            "transpose",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(|t, v| t.transpose(v[0]))),
        ),
        (
            "slice",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(move |t, v| t.slice(v[0], 1, 1, n - 1))),
        ),
        (
            "embedding_add",
            vec![random(&mut r, &[m, n]), random(&mut r, &[m + 1, n])],
            mk(Box::new(|t, v| t.embedding_add(v[0], v[1]))),
        ),
        (
            "dropout",
            vec![random(&mut r, &[m, n])],
            mk(Box::new(move |t, v| t.dropout(v[0], 0.3, key, true))),
        ),
    ];
    cases.push((
        "sum",
        vec![random(&mut r, &[m, n])],
        Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0])),
    ));
    cases.push((
        "cross_entropy_with_logits",
        vec![random(&mut r, &[m, n])],
        Box::new(move |t: &mut Tape, v: &[Var]| t.cross_entropy_with_logits(v[0], &labels)),
    ));
    cases
}

/// Support cross-entropy of a classifier with respect to input, μ and kernels.
fn classifier_fd(arch: &ClassifierArch, batch: usize, seed: u64, running: bool) -> Real {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = arch.init(&mut rng).unwrap();
    let jitter = |s: &ParamSet, rng: &mut ChaCha8Rng| -> Vec<(String, Tensor)> {
        s.iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.random_range(-0.3..0.3)),
                )
            })
            .collect()
    };
    let mu = jitter(&p.mu, &mut rng);
    let w = jitter(&p.w, &mut rng);
    let mut shape = vec![batch];
    shape.extend_from_slice(&arch.input_shape);
    let labels: Vec<usize> = (0..batch).map(|i| i % arch.n_classes).collect();
    let stats: Vec<BatchStats> = (0..arch.blocks())
        .map(|_| BatchStats {
            mean: (0..arch.filters)
                .map(|_| rng.random_range(-0.2..0.2))
                .collect(),
            var: (0..arch.filters)
                .map(|_| rng.random_range(0.5..1.5))
                .collect(),
        })
        .collect();
    let mut leaves = vec![random(&mut rng, &shape)];
    leaves.extend(mu.iter().map(|(_, t)| t.clone()));
    leaves.extend(w.iter().map(|(_, t)| t.clone()));
    let names: Vec<String> = mu.iter().map(|(n, _)| n.clone()).collect();
    let n_mu = names.len();
    let report = finite_difference_check(
        |t, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[1..1 + n_mu].iter().copied()));
            let mode = if running {
                BnMode::Running(&stats)
            } else {
                BnMode::Batch
            };
            let out = arch
                .forward(t, &bound, &v[1 + n_mu..], v[0], mode)
                .map_err(|e| match e {
                    mocl_core::CoreError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
            t.cross_entropy_with_logits(out.logits, &labels)
        },
        &leaves,
        FD_EPS,
        FD_TOL,
    )
    .unwrap();
    report.max_rel_error.iter().copied().fold(0.0, Real::max)
}

fn c1_gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst: (Real, String) = (0.0, String::new());
    let mut checks = 0;
    for seed in 0..12 {
        for (name, leaves, f) in primitive_cases(seed) {
            let rep = finite_difference_check(&f, &leaves, FD_EPS, FD_TOL).unwrap();
            let e = rep.max_rel_error.iter().copied().fold(0.0, Real::max);
            if e > worst.0 {
                worst = (e, format!("{name} (seed {seed})"));
            }
            checks += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..6 {
        let running = seed % 2 == 1;
        let c = rng.random_range(1..=2);
        let small = ClassifierArch::small([c, rng.random_range(3..=6), 5], 2 + seed as usize % 2)
            .with_filters(rng.random_range(1..=3));
        let small = ClassifierArch {
            input_shape: [c, small.input_shape[1], small.input_shape[1]],
            ..small
        };
        let cifar = ClassifierArch::cifar([c, 8, 8], 2).with_filters(rng.random_range(1..=2));
        for (arch, batch) in [(small, 3), (cifar, 2)] {
            let e = classifier_fd(&arch, batch, seed, running);
            if e > worst.0 {
                worst = (e, format!("{:?} classifier (seed {seed})", arch.variant));
            }
            checks += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        worst.0 <= FD_TOL && elapsed < Duration::from_secs(120),
        format!(
            "{checks} checks, worst relative error {:.2e} at {}, {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Convolution against nested loops

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()
                                        [((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    Tensor::new(vec![b, o, oh, ow], out).unwrap()
}

fn c2_conv_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Real = 0.0;
    let mut cases = 0;
    for stride in [1, 2] {
        for pad in [0, 1] {
            for k in [1, 3] {
                for _ in 0..5 {
                    let (b, c, o) = (
                        rng.random_range(1..=3),
                        rng.random_range(1..=4),
                        rng.random_range(1..=4),
                    );
                    let (h, w) = (rng.random_range(3..=9), rng.random_range(3..=9));
                    let x = random(&mut rng, &[b, c, h, w]);
                    let kern = random(&mut rng, &[o, c, k, k]);
                    let mut t = Tape::no_grad();
                    let (xv, kv) = (t.constant(x.clone()), t.constant(kern.clone()));
                    let y = t.conv2d(xv, kv, stride, pad).unwrap();
                    let want = naive_conv(&x, &kern, stride, pad);
                    assert_eq!(t.value(y).shape(), want.shape());
                    for (a, b) in t.value(y).data().iter().zip(want.data()) {
                        worst = worst.max((a - b).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    Verdict::new(
        worst <= 1e-12,
        format!("{cases} cases, max |Δ| {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Inner-loop wiring with injected update rules

struct ZeroUpdate(usize);

impl UpdateRule for ZeroUpdate {
    fn init_params(&self, _: &mut ChaCha8Rng) -> mocl_core::Result<ParamSet> {
        Ok(ParamSet::new())
    }
    fn uses_scores(&self) -> bool {
        false
    }
    fn predict(&self, tape: &mut Tape, _: &Bound, _: &UpdateContext<'_>) -> mocl_core::Result<Var> {
        Ok(tape.constant(Tensor::zeros(&[self.0])))
    }
}

struct GradientStep(Real);

impl UpdateRule for GradientStep {
    fn init_params(&self, _: &mut ChaCha8Rng) -> mocl_core::Result<ParamSet> {
        Ok(ParamSet::new())
    }
    fn uses_scores(&self) -> bool {
        true
    }
    fn predict(
        &self,
        tape: &mut Tape,
        _: &Bound,
        ctx: &UpdateContext<'_>,
    ) -> mocl_core::Result<Var> {
        let g = ctx.raw_grad.expect("scores requested");
        Ok(tape.constant(Tensor::vector(g.iter().map(|v| -self.0 * v).collect())))
    }
}

fn toy_episode(shape: [usize; 3], seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 6;
    Episode {
        support_x: Tensor::from_fn(&[b, shape[0], shape[1], shape[2]], |_| {
            rng.random_range(0.0..1.0)
        }),
        support_y: (0..b).map(|i| i % 2).collect(),
        query_x: Tensor::from_fn(&[4, shape[0], shape[1], shape[2]], |_| {
            rng.random_range(0.0..1.0)
        }),
        query_y: vec![0, 1, 1, 0],
        support_ids: (0..b).collect(),
        query_ids: (b..b + 4).collect(),
    }
}

fn support_loss(arch: &ClassifierArch, mu: &ParamSet, w: &[Real], ep: &Episode) -> Real {
    let mut t = Tape::no_grad();
    let mb = mu.bind(&mut t, false);
    let wv = t.constant(Tensor::vector(w.to_vec()));
    let xv = t.constant(ep.support_x.clone());
    let out = arch
        .forward_flat(&mut t, &mb, wv, xv, BnMode::Batch)
        .unwrap();
    let l = t
        .cross_entropy_with_logits(out.logits, &ep.support_y)
        .unwrap();
    t.value(l).item()
}

fn c3_wiring_oracle() -> Verdict {
    let arch = ClassifierArch::small([1, 6, 6], 2).with_filters(3);
    let p = arch.init(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let w = arch.weight_layout().flatten(&p.w).unwrap();
    let ep = toy_episode(arch.input_shape, 3);
    let opts = |q| AdaptOptions {
        q,
        alpha: 0.1,
        keep_fraction: 0.6,
        train: true,
        dropout_seed: 1,
        dropout_counter: 0,
    };
    let empty = ParamSet::new();

    // Gradient-step stub against a central-difference SGD step on W.
    let out =
        adapt_and_optimize(&arch, &GradientStep(0.1), &p.mu, &empty, &w, &ep, opts(1)).unwrap();
    let mut step_err: Real = 0.0;
    for i in 0..w.len() {
        let h = 1e-5;
        let (mut a, mut b) = (w.clone(), w.clone());
        a[i] += h;
        b[i] -= h;
        let g =
            (support_loss(&arch, &p.mu, &a, &ep) - support_loss(&arch, &p.mu, &b, &ep)) / (2.0 * h);
        step_err = step_err.max((out.w_tilde[i] - (w[i] - 0.1 * g)).abs());
    }

    // Zero stub: W̃ is W, and μ follows Q plain SGD steps.
    let q = 3;
    let out =
        adapt_and_optimize(&arch, &ZeroUpdate(w.len()), &p.mu, &empty, &w, &ep, opts(q)).unwrap();
    let w_same = out
        .w_tilde
        .iter()
        .zip(&w)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let mut theta = p.mu.clone();
    for _ in 0..q {
        let mut t = Tape::new();
        let mb = theta.bind(&mut t, true);
        let wv = t.constant(Tensor::vector(w.clone()));
        let xv = t.constant(ep.support_x.clone());
        let o = arch
            .forward_flat(&mut t, &mb, wv, xv, BnMode::Batch)
            .unwrap();
        let l = t
            .cross_entropy_with_logits(o.logits, &ep.support_y)
            .unwrap();
        let g = t.backward(l).unwrap();
        let gm = mb.gradients(&t, &g);
        theta.axpy(-0.1, &gm);
    }
    let theta_err = out
        .mu
        .iter()
        .zip(theta.iter())
        .flat_map(|((_, a), (_, b))| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, Real::max);
    Verdict::new(
        step_err <= 1e-9 && w_same && theta_err <= 1e-12,
        format!(
            "gradient-step |Δ| {step_err:.2e}; zero stub W̃==W {w_same}, θ′ |Δ| {theta_err:.2e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Importance pipeline

fn c4_importance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sizes: Vec<usize> = vec![1, 2, 3, 4, 5, 10, 10_000];
    sizes.extend((0..40).map(|_| rng.random_range(1..=10_000)));
    let mut problems = Vec::new();
    for &r in &sizes {
        let layout = WeightLayout {
            kernels: vec![KernelShape {
                name: "w".into(),
                out_ch: r,
                in_ch: 1,
                kh: 1,
                kw: 1,
            }],
        };
        let g: Vec<Real> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = normalize_and_threshold(&g, &layout, KEEP_FRACTION).unwrap();
        let want = (0.6 * r as f64).ceil() as usize;
        if s.kept_count() != want {
            problems.push(format!("R={r}: kept {} not {want}", s.kept_count()));
        }
        if let Some(v) = s
            .values
            .iter()
            .zip(&s.kept_mask)
            .find(|(v, k)| **k && !(**v > 0.0 && **v <= 1.0))
        {
            problems.push(format!("R={r}: survivor score {}", v.0));
        }
        if s.values
            .iter()
            .zip(&s.kept_mask)
            .any(|(v, k)| !k && *v != 0.0)
        {
            problems.push(format!("R={r}: dropped entry not zero"));
        }
        let equal = normalize_and_threshold(&vec![0.37; r], &layout, KEEP_FRACTION).unwrap();
        if equal.values.iter().any(|&v| v != 1.0) {
            problems.push(format!("R={r}: equal gradients not all ones"));
        }
    }
    // Token round trips in both modes on a multi-layer 3×3 layout.
    let layout = WeightLayout {
        kernels: vec![
            KernelShape {
                name: "a".into(),
                out_ch: 5,
                in_ch: 1,
                kh: 3,
                kw: 3,
            },
            KernelShape {
                name: "b".into(),
                out_ch: 4,
                in_ch: 5,
                kh: 3,
                kw: 3,
            },
        ],
    };
    let r = layout.total();
    let w: Vec<Real> = (0..r).map(|_| rng.random_range(-2.0..2.0)).collect();
    let g: Vec<Real> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scores = normalize_and_threshold(&g, &layout, KEEP_FRACTION).unwrap();
    for mode in [Allocation::Sequential, Allocation::Spatial] {
        let t = tokenize(&w, &scores, &layout, mode).unwrap();
        let back = reassemble(&t, &t.weights, t.width).unwrap();
        if !back.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits()) {
            problems.push(format!("{mode:?} round trip not bit-exact"));
        }
    }
    let shown: Vec<&String> = problems.iter().take(4).collect();
    Verdict::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} sizes", sizes.len())
        } else {
            format!("{shown:?}")
        },
    )
}

// ---------------------------------------------------------------------------
// 5. Update bound and masking

fn c5_bound_and_mask() -> Verdict {
    let arch = ClassifierArch::small([1, 8, 8], 2).with_filters(4);
    let mut worst: Real = 0.0;
    let mut leaks = 0usize;
    let mut cases = 0;
    for seed in 0..12u64 {
        for scale in [1.0, 1e3, 1e6] {
            let hard = seed % 2 == 0;
            let cfg = MetaOptimizerConfig {
                task_encoder: TaskEncoderKind::Simple,
                allocation: if seed % 3 == 0 {
                    Allocation::Sequential
                } else {
                    Allocation::Spatial
                },
                hard_mask: hard,
                head_init_scale: scale,
                ..Default::default()
            };
            let rule =
                MetaOptimizer::new(cfg, arch.weight_layout(), arch.input_shape, None).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = arch.init(&mut rng).unwrap();
            let psi = rule.init_params(&mut rng).unwrap();
            let w = arch.weight_layout().flatten(&p.w).unwrap();
            let ep = toy_episode(arch.input_shape, seed);
            let opts = AdaptOptions {
                q: 1,
                alpha: 0.01,
                keep_fraction: 0.6,
                train: true,
                dropout_seed: seed,
                dropout_counter: 0,
            };
            let out = adapt_and_optimize(&arch, &rule, &p.mu, &psi, &w, &ep, opts).unwrap();
            let (scores, _) = compute_scores(&arch, &p.mu, &w, &ep, 0.6).unwrap();
            let mut delta: Vec<Real> = out.w_tilde.iter().zip(&w).map(|(a, b)| a - b).collect();
            // ΔW read back directly from the rule for the bound.
            let mut t = Tape::no_grad();
            let pb = psi.bind(&mut t, false);
            let ctx = UpdateContext {
                support: &ep,
                w: &w,
                scores: Some(&scores),
                raw_grad: None,
                train: true,
                dropout: DropoutKey { seed, counter: 0 },
            };
            let d = rule.predict(&mut t, &pb, &ctx).unwrap();
            worst = worst.max(t.value(d).max_abs());
            if hard {
                let before = delta.clone();
                apply_mask(&mut delta, &scores.kept_mask, true);
                leaks += before
                    .iter()
                    .zip(&delta)
                    .filter(|(a, b)| a.to_bits() != b.to_bits())
                    .count();
            }
            cases += 1;
        }
    }
    Verdict::new(
        worst < 3.0 && leaks == 0,
        format!("{cases} cases, max |ΔW| {worst}, hard-mask leaks {leaks}"),
    )
}

// ---------------------------------------------------------------------------
// 6. Metric oracles

fn c6_metrics() -> Verdict {
    let m = |rows: [[Real; 3]; 3]| {
        AccuracyMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    };
    let cases = [
        (
            m([[0.5, 0.25, 0.5], [0.75, 1.0, 0.5], [0.25, 0.75, 0.5]]),
            0.5,
            -0.25,
            0.375,
        ),
        (
            m([[0.75, 0.5, 0.0], [1.0, 0.75, 0.125], [0.75, 0.75, 0.75]]),
            0.75,
            0.0,
            0.3125,
        ),
        (
            m([[0.5, 0.0, 0.0], [0.5, 0.5, 0.0], [1.0, 0.875, 0.625]]),
            2.5 / 3.0,
            0.4375,
            0.0,
        ),
    ];
    let mut ok = cases.iter().all(|(r, a, b, f)| {
        avg_accuracy(r) == *a && bwt(r).unwrap() == *b && fwt(r).unwrap() == *f
    });
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let mut rows: Vec<Vec<Real>> = (0..4)
            .map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        for j in 0..4 {
            rows[3][j] = rows[j][j];
        }
        ok &= bwt(&AccuracyMatrix::new(rows).unwrap()).unwrap() == 0.0;
    }
    Verdict::new(ok, "three hand matrices, 50 diagonal-last-row matrices")
}

// ---------------------------------------------------------------------------
// 7–10. Desk-scale protocol

const SEEDS: [u64; 3] = [0, 1, 2];

fn desk_config(encoder: &Path) -> RunConfig {
    RunConfig {
        n_tasks: 3,
        classes_per_task: 2,
        toy_size: 12,
        toy_train_per_class: 150,
        toy_test_per_class: 80,
        toy_noise: 0.4,
        toy_max_shift: 2,
        filters: Some(32),
        k_shot: 5,
        q_train: 3,
        q_test: 50,
        alpha: 1e-2,
        beta: 1e-4,
        warmup_steps: 180,
        outer_steps_per_task: 200,
        transfer_lr: 1e-3,
        head_init_scale: 0.1,
        eval_cap: 100,
        encoder_checkpoint: Some(encoder.to_path_buf()),
        ..RunConfig::default()
    }
}

struct DeskRun {
    metrics: Metrics,
    matrix: AccuracyMatrix,
    elapsed: Duration,
}

struct Desk {
    root: tempfile::TempDir,
    encoder: PathBuf,
    pretrain: Duration,
}

impl Desk {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        let encoder = root.path().join("encoder.ckpt");
        let start = Instant::now();
        let report = pretrain_encoder(&desk_config(&encoder), &encoder).unwrap();
        println!(
            "desk encoder: held-out accuracy {:.3} (chance {:.3})",
            report.heldout_accuracy, report.chance
        );
        Self {
            root,
            encoder,
            pretrain: start.elapsed(),
        }
    }

    fn run(&self, variant: VariantKind, k: usize, seed: u64) -> DeskRun {
        let cfg = RunConfig {
            variant,
            seed,
            k_shot: k,
            eval_k: Some(k),
            ..desk_config(&self.encoder)
        };
        let dir = self.root.path().join(format!("{variant}-k{k}-s{seed}"));
        let start = Instant::now();
        let metrics = train(&cfg, &dir).unwrap();
        let elapsed = start.elapsed();
        let csv = std::fs::read_to_string(dir.join("accuracy_matrix.csv")).unwrap();
        let rows = csv
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        let run = DeskRun {
            metrics,
            matrix: AccuracyMatrix::new(rows).unwrap(),
            elapsed,
        };
        println!(
            "  {variant:<17} K={k:<2} seed {seed}: avg {:.3} bwt {:+.3} fwt {:.3} diag {:.3} off {:.3} ({:.0}s)",
            run.metrics.avg_accuracy,
            run.metrics.bwt.unwrap(),
            run.metrics.fwt.unwrap(),
            run.matrix.mean_diagonal(),
            run.matrix.mean_off_diagonal(),
            elapsed.as_secs_f64()
        );
        run
    }

    fn runs(&self, variant: VariantKind, k: usize) -> Vec<DeskRun> {
        SEEDS.iter().map(|&s| self.run(variant, k, s)).collect()
    }
}

fn mean(runs: &[DeskRun], f: impl Fn(&DeskRun) -> Real) -> Real {
    runs.iter().map(f).sum::<Real>() / runs.len() as Real
}

fn c7_directional(desk: &Desk, proposed: &[DeskRun], maml: &[DeskRun]) -> Verdict {
    let (pb, mb) = (
        mean(proposed, |r| r.metrics.bwt.unwrap()),
        mean(maml, |r| r.metrics.bwt.unwrap()),
    );
    let (pf, mf) = (
        mean(proposed, |r| r.metrics.fwt.unwrap()),
        mean(maml, |r| r.metrics.fwt.unwrap()),
    );
    let runtime = desk.pretrain
        + proposed
            .iter()
            .chain(maml)
            .map(|r| r.elapsed)
            .sum::<Duration>();
    let bwt_ok = pb - mb >= 0.03;
    let fwt_ok = pf >= mf - 0.01;
    let time_ok = runtime <= Duration::from_secs(20 * 60);
    Verdict::new(
        bwt_ok && fwt_ok && time_ok,
        format!(
            "BWT proposed {:+.2} vs MAML {:+.2} (Δ {:+.2} pts, need ≥ +3) {}; FWT {:.2} vs {:.2} (Δ {:+.2} pts, need ≥ −1) {}; {:.0}s {}",
            100.0 * pb,
            100.0 * mb,
            100.0 * (pb - mb),
            ok_str(bwt_ok),
            100.0 * pf,
            100.0 * mf,
            100.0 * (pf - mf),
            ok_str(fwt_ok),
            runtime.as_secs_f64(),
            ok_str(time_ok)
        ),
    )
}

fn ok_str(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "short"
    }
}

fn c8_ablation(proposed: &[DeskRun], ablated: &[DeskRun]) -> Verdict {
    let (pb, ab) = (
        mean(proposed, |r| r.metrics.bwt.unwrap()),
        mean(ablated, |r| r.metrics.bwt.unwrap()),
    );
    Verdict::new(
        ab <= pb,
        format!(
            "BWT without scores {:+.2} vs proposed {:+.2} pts",
            100.0 * ab,
            100.0 * pb
        ),
    )
}

fn c9_transfer(transfer: &[DeskRun]) -> Verdict {
    let (d, o) = (
        mean(transfer, |r| r.matrix.mean_diagonal()),
        mean(transfer, |r| r.matrix.mean_off_diagonal()),
    );
    Verdict::new(
        d - o >= 0.10,
        format!(
            "diagonal {:.2} vs off-diagonal {:.2} (Δ {:+.2} pts)",
            100.0 * d,
            100.0 * o,
            100.0 * (d - o)
        ),
    )
}

fn c10_k_sweep(k5: &[DeskRun], k1: &[DeskRun]) -> Verdict {
    let (a5, a1) = (
        mean(k5, |r| r.metrics.avg_accuracy),
        mean(k1, |r| r.metrics.avg_accuracy),
    );
    Verdict::new(
        a5 >= a1 - 0.01,
        format!(
            "avg accuracy K=5 {:.2} vs K=1 {:.2}",
            100.0 * a5,
            100.0 * a1
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Determinism and persistence

fn c11_determinism(desk: &Desk) -> Verdict {
    let cfg = RunConfig {
        outer_steps_per_task: 10,
        ..desk_config(&desk.encoder)
    };
    let dirs = [
        desk.root.path().join("det-a"),
        desk.root.path().join("det-b"),
    ];
    for d in &dirs {
        train(&cfg, d).unwrap();
    }
    let same = |f: &str| {
        std::fs::read(dirs[0].join(f)).unwrap() == std::fs::read(dirs[1].join(f)).unwrap()
    };
    let files_ok = same("metrics.json") && same("accuracy_matrix.csv");

    let (data, tasks) = load_tasks(&cfg).unwrap();
    let enc = resolve_encoder(&cfg, data.image_shape).unwrap();
    let learner = build_run_learner(&cfg, data.image_shape, enc).unwrap();
    let run = meta_train_stream(&learner, &tasks, cfg.seed).unwrap();
    let path = desk.root.path().join("snap.ckpt");
    snapshot_to_checkpoint("proposed", &run.snapshots[2])
        .save(&path)
        .unwrap();
    let loaded = snapshot_from_checkpoint(&Checkpoint::load(&path).unwrap());
    let ep = sample_episode(&tasks[1], 5, 20, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let a = learner
        .adapt_for_inference(&run.snapshots[2], &ep, cfg.q_test)
        .unwrap();
    let b = learner
        .adapt_for_inference(&loaded, &ep, cfg.q_test)
        .unwrap();
    let forward_ok = learner
        .logits(&a, &ep.query_x)
        .unwrap()
        .bit_eq(&learner.logits(&b, &ep.query_x).unwrap());
    Verdict::new(
        files_ok && forward_ok,
        format!("byte-identical outputs {files_ok}, checkpoint forward bit-exact {forward_ok}"),
    )
}

fn main() {
    let mut failed = Vec::new();
    let mut record = |id: usize, name: &str, v: Verdict| {
        println!(
            "criterion {id:>2} {}: {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failed.push(id);
        }
    };
    record(1, "gradient correctness", c1_gradient_correctness());
    record(2, "conv oracle", c2_conv_oracle());
    record(3, "inner-loop wiring oracle", c3_wiring_oracle());
    record(4, "importance pipeline", c4_importance());
    record(5, "update bound and masking", c5_bound_and_mask());
    record(6, "metric oracles", c6_metrics());

    let desk = Desk::new();
    let proposed = desk.runs(VariantKind::Proposed, 5);
    let maml = desk.runs(VariantKind::Maml, 5);
    record(
        7,
        "desk-scale directional result",
        c7_directional(&desk, &proposed, &maml),
    );
    let ablated = desk.runs(VariantKind::AblateNoScores, 5);
    record(8, "ablation direction", c8_ablation(&proposed, &ablated));
    let transfer = desk.runs(VariantKind::Transfer, 5);
    record(9, "transfer-baseline shape", c9_transfer(&transfer));
    let k1 = desk.runs(VariantKind::Proposed, 1);
    record(10, "K-sweep direction", c10_k_sweep(&proposed, &k1));
    record(11, "determinism and persistence", c11_determinism(&desk));

    if failed.is_empty() {
        println!("acceptance: all 11 criteria PASS");
    } else {
        println!("acceptance: FAIL on criteria {failed:?}");
        std::process::exit(1);
    }
}
