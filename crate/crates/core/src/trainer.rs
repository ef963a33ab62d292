//! The inner Adapt&Optimize loop, the first-order outer meta-update, and the
//! stream-level training loop.

use mocl_autodiff::{BatchStats, DropoutKey, Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::importance::{self, ImportanceScores};
use crate::layers::{linear, Backbone, BnMode, ClassifierArch};
use crate::meta_optimizer::{UpdateContext, UpdateRule};
use crate::optim::{clip_global_norm, Adam, WarmupLinearDecay};
use crate::params::{kaiming_uniform, ParamSet};
use crate::seeding::{derive_seed, SeedTag};
use crate::streams::{sample_episode, Episode, Task};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HyperParams {
    pub k_shot: usize,
    pub n_way: usize,
    /// Inner iterations during meta-training.
    pub q_train: usize,
    /// Inner iterations at inference.
    pub q_test: usize,
    /// Inner SGD rate.
    pub alpha: Real,
    /// Outer Adam rate.
    pub beta: Real,
    pub weight_decay: Real,
    pub warmup_steps: u64,
    /// Step at which the ψ rate reaches zero; the total step budget when `None`.
    pub decay_horizon: Option<u64>,
    pub grad_clip_norm: Real,
    pub keep_fraction: Real,
    pub batch_size: usize,
    /// Query examples per episode; derived from `batch_size` when `None`.
    pub query_size: Option<usize>,
    /// Episodes per outer step.
    pub batches_per_step: usize,
    pub outer_steps_per_task: usize,
    pub bn_momentum: Real,
    /// Adam rate of the transfer baseline head.
    pub transfer_lr: Real,
}

impl HyperParams {
    /// Defaults for the MNIST-family streams.
    pub fn mnist(n_way: usize) -> Self {
        Self {
            k_shot: 5,
            n_way,
            q_train: 3,
            q_test: 50,
            alpha: 1e-3,
            beta: 1e-4,
            weight_decay: 1e-5,
            warmup_steps: 3000,
            decay_horizon: None,
            grad_clip_norm: 1.0,
            keep_fraction: importance::KEEP_FRACTION,
            batch_size: 32,
            query_size: None,
            batches_per_step: 1,
            outer_steps_per_task: 200,
            bn_momentum: 0.1,
            transfer_lr: 1e-4,
        }
    }

    /// Defaults for the CIFAR-family streams.
    pub fn cifar(n_way: usize) -> Self {
        Self {
            q_train: 5,
            ..Self::mnist(n_way)
        }
    }

    /// `batch − K·N` when positive, else 16.
    pub fn query_size(&self) -> usize {
        self.query_size.unwrap_or_else(|| {
            let s = self.k_shot * self.n_way;
            if self.batch_size > s {
                self.batch_size - s
            } else {
                16
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_shot", self.k_shot),
            ("n_way", self.n_way),
            ("q_train", self.q_train),
            ("q_test", self.q_test),
            ("batch_size", self.batch_size),
            ("batches_per_step", self.batches_per_step),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(CoreError::config(key, "must be positive"));
            }
        }
        if self.q_test < self.q_train {
            return Err(CoreError::config("q_test", "must be ≥ q_train"));
        }
        for (key, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("weight_decay", self.weight_decay),
            ("grad_clip_norm", self.grad_clip_norm),
            ("bn_momentum", self.bn_momentum),
            ("transfer_lr", self.transfer_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::config(
                    key,
                    format!("{v} must be finite and non-negative"),
                ));
            }
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(CoreError::config("keep_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// The meta-learning method driving a run.
pub enum Method {
    /// Alg. 2 with a learned (or stub) update rule over W.
    Meta(Box<dyn UpdateRule>),
    /// Plain SGD on every classifier parameter in the inner loop.
    Maml,
    /// Frozen encoder with a trainable linear head.
    Transfer(Backbone),
}

impl Method {
    pub fn is_transfer(&self) -> bool {
        matches!(self, Method::Transfer(_))
    }
}

/// Mutable training state. `mu` holds the head only for the transfer method.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub mu: ParamSet,
    pub psi: ParamSet,
    pub w: Vec<Real>,
    pub running: Vec<BatchStats>,
    pub opt_mu: Adam,
    pub opt_psi: Adam,
    /// Adam state of W, used only when W is meta-learned.
    pub opt_w: Option<Adam>,
    pub schedule_step: u64,
    pub episode_rng: ChaCha8Rng,
    pub dropout_seed: u64,
    pub dropout_counter: u64,
    pub task_cursor: usize,
    /// Number of `W ← W̃` writes so far.
    pub w_writes: u64,
}

/// Immutable state captured at a task boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub task: usize,
    pub mu: ParamSet,
    pub psi: ParamSet,
    pub w: Vec<Real>,
    pub running: Vec<BatchStats>,
}

/// One record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub task: usize,
    pub inner_losses: Vec<Real>,
    pub query_loss: Real,
    pub grad_norm: Real,
    pub lr_mu: Real,
    pub lr_psi: Real,
}

/// Adapted classifier ready for prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapted {
    pub mu: ParamSet,
    pub w: Vec<Real>,
}

fn check_finite(v: Real, what: &str, location: impl FnOnce() -> String) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite {
            what: what.to_string(),
            location: location(),
        })
    }
}

fn sgd(params: &mut ParamSet, grads: &ParamSet, alpha: Real) {
    params.axpy(-alpha, grads);
}

/// Support cross-entropy and its gradient with respect to the flat W at fixed μ.
pub fn weight_gradient(
    arch: &ClassifierArch,
    mu: &ParamSet,
    w: &[Real],
    support: &Episode,
) -> Result<(Real, Vec<Real>)> {
    let mut tape = Tape::new();
    let mu_b = mu.bind(&mut tape, false);
    let wv = tape.leaf(Tensor::vector(w.to_vec()));
    let x = tape.constant(support.support_x.clone());
    let out = arch.forward_flat(&mut tape, &mu_b, wv, x, BnMode::Batch)?;
    let loss = tape.cross_entropy_with_logits(out.logits, &support.support_y)?;
    let l = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = grads.take(wv).expect("W is a leaf").into_data();
    Ok((l, g))
}

/// Importance scores at the current W, plus the signed gradient they came from.
pub fn compute_scores(
    arch: &ClassifierArch,
    mu: &ParamSet,
    w: &[Real],
    support: &Episode,
    keep_fraction: Real,
) -> Result<(ImportanceScores, Vec<Real>)> {
    let (_, g) = weight_gradient(arch, mu, w, support)?;
    let scores = importance::normalize_and_threshold(&g, &arch.weight_layout(), keep_fraction)?;
    Ok((scores, g))
}

/// State needed to rebuild the final inner iteration's graph.
#[derive(Clone, Debug)]
struct FinalIteration {
    psi: ParamSet,
    w: Vec<Real>,
    scores: Option<ImportanceScores>,
    raw_grad: Option<Vec<Real>>,
    dropout: DropoutKey,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub mu: ParamSet,
    pub psi: ParamSet,
    pub w_tilde: Vec<Real>,
    /// Support loss at each iteration, evaluated at W̃ before the SGD step.
    pub inner_losses: Vec<Real>,
    pub score_calls: usize,
    last: Option<FinalIteration>,
}

/// Inner-loop options.
#[derive(Clone, Copy, Debug)]
pub struct AdaptOptions {
    pub q: usize,
    pub alpha: Real,
    pub keep_fraction: Real,
    pub train: bool,
    pub dropout_seed: u64,
    /// Counter of the first iteration; iteration `i` uses `counter + i`.
    pub dropout_counter: u64,
}

/// Adapt&Optimize on copies of (μ, ψ, W); the inputs are never mutated.
pub fn adapt_and_optimize(
    arch: &ClassifierArch,
    rule: &dyn UpdateRule,
    mu: &ParamSet,
    psi: &ParamSet,
    w: &[Real],
    support: &Episode,
    opts: AdaptOptions,
) -> Result<AdaptOutcome> {
    if opts.q == 0 {
        return Err(CoreError::Precondition("Adapt&Optimize needs Q ≥ 1".into()));
    }
    if support.support_len() == 0 {
        return Err(CoreError::Precondition("empty support set".into()));
    }
    let mut mu_p = mu.clone();
    let mut psi_p = psi.clone();
    let mut w_cur = w.to_vec();
    let mut inner_losses = Vec::with_capacity(opts.q);
    let mut score_calls = 0;
    let mut last = None;
    for it in 0..opts.q {
        let (scores, raw_grad) = if rule.uses_scores() {
            score_calls += 1;
            let (s, g) = compute_scores(arch, &mu_p, &w_cur, support, opts.keep_fraction)?;
            (Some(s), Some(g))
        } else {
            (None, None)
        };
        let dropout = DropoutKey {
            seed: opts.dropout_seed,
            counter: opts.dropout_counter.wrapping_add(it as u64),
        };
        let ctx = UpdateContext {
            support,
            w: &w_cur,
            scores: scores.as_ref(),
            raw_grad: raw_grad.as_deref(),
            train: opts.train,
            dropout,
        };
        let mut tape = Tape::new();
        let mu_b = mu_p.bind(&mut tape, true);
        let psi_b = psi_p.bind(&mut tape, true);
        let delta = rule.predict(&mut tape, &psi_b, &ctx)?;
        let w_const = tape.constant(Tensor::vector(w_cur.clone()));
        let w_tilde = tape.add(w_const, delta)?;
        let w_tilde_val = tape.value(w_tilde).data().to_vec();
        let x = tape.constant(support.support_x.clone());
        let out = arch.forward_flat(&mut tape, &mu_b, w_tilde, x, BnMode::Batch)?;
        let loss = tape.cross_entropy_with_logits(out.logits, &support.support_y)?;
        let l = tape.value(loss).item();
        check_finite(l, "support loss", || format!("inner iteration {it}"))?;
        inner_losses.push(l);
        let grads = tape.backward(loss)?;
        let g_mu = mu_b.gradients(&tape, &grads);
        let g_psi = psi_b.gradients(&tape, &grads);
        if it + 1 == opts.q {
            last = Some(FinalIteration {
                psi: psi_p.clone(),
                w: w_cur.clone(),
                scores,
                raw_grad,
                dropout,
            });
        }
        sgd(&mut mu_p, &g_mu, opts.alpha);
        sgd(&mut psi_p, &g_psi, opts.alpha);
        w_cur = w_tilde_val;
    }
    Ok(AdaptOutcome {
        mu: mu_p,
        psi: psi_p,
        w_tilde: w_cur,
        inner_losses,
        score_calls,
        last,
    })
}

/// First-order meta-gradient of one episode's query loss.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub mu: ParamSet,
    pub psi: ParamSet,
    pub query_loss: Real,
    pub batch_stats: Vec<BatchStats>,
}

/// Re-records the final inner iteration with the adapted μ as leaves and ψ′ as
/// leaves feeding ΔW, then differentiates the query loss of `f_{μ′, W̃}`.
pub fn meta_gradient(
    arch: &ClassifierArch,
    rule: &dyn UpdateRule,
    outcome: &AdaptOutcome,
    episode: &Episode,
) -> Result<MetaGradient> {
    let last = outcome
        .last
        .as_ref()
        .ok_or_else(|| CoreError::Precondition("outcome has no final iteration".into()))?;
    let ctx = UpdateContext {
        support: episode,
        w: &last.w,
        scores: last.scores.as_ref(),
        raw_grad: last.raw_grad.as_deref(),
        train: true,
        dropout: last.dropout,
    };
    let mut tape = Tape::new();
    let mu_b = outcome.mu.bind(&mut tape, true);
    let psi_b = last.psi.bind(&mut tape, true);
    let delta = rule.predict(&mut tape, &psi_b, &ctx)?;
    let w_const = tape.constant(Tensor::vector(last.w.clone()));
    let w_tilde = tape.add(w_const, delta)?;
    let x = tape.constant(episode.query_x.clone());
    let out = arch.forward_flat(&mut tape, &mu_b, w_tilde, x, BnMode::Batch)?;
    let loss = tape.cross_entropy_with_logits(out.logits, &episode.query_y)?;
    let query_loss = tape.value(loss).item();
    check_finite(query_loss, "query loss", || "meta-gradient pass".into())?;
    let grads = tape.backward(loss)?;
    Ok(MetaGradient {
        mu: mu_b.gradients(&tape, &grads),
        psi: psi_b.gradients(&tape, &grads),
        query_loss,
        batch_stats: out.batch_stats,
    })
}

/// Options for [`adapt_and_optimize`] with inference-mode defaults.
fn inference_options(hp: &HyperParams, q: usize, dropout_seed: u64) -> AdaptOptions {
    AdaptOptions {
        q,
        alpha: hp.alpha,
        keep_fraction: hp.keep_fraction,
        train: false,
        dropout_seed,
        dropout_counter: 0,
    }
}

/// Q SGD steps on μ ∪ W; returns adapted copies and the support losses.
fn maml_inner(
    arch: &ClassifierArch,
    mu: &ParamSet,
    w: &[Real],
    support: &Episode,
    q: usize,
    alpha: Real,
) -> Result<(ParamSet, Vec<Real>, Vec<Real>)> {
    let mut mu_p = mu.clone();
    let mut w_p = w.to_vec();
    let mut losses = Vec::with_capacity(q);
    for it in 0..q {
        let mut tape = Tape::new();
        let mu_b = mu_p.bind(&mut tape, true);
        let wv = tape.leaf(Tensor::vector(w_p.clone()));
        let x = tape.constant(support.support_x.clone());
        let out = arch.forward_flat(&mut tape, &mu_b, wv, x, BnMode::Batch)?;
        let loss = tape.cross_entropy_with_logits(out.logits, &support.support_y)?;
        let l = tape.value(loss).item();
        check_finite(l, "support loss", || format!("inner iteration {it}"))?;
        losses.push(l);
        let mut grads = tape.backward(loss)?;
        let g_mu = mu_b.gradients(&tape, &grads);
        let g_w = grads.take(wv).expect("leaf");
        sgd(&mut mu_p, &g_mu, alpha);
        for (p, g) in w_p.iter_mut().zip(g_w.data()) {
            *p -= alpha * g;
        }
    }
    Ok((mu_p, w_p, losses))
}

fn head_logits(
    backbone: &Backbone,
    head: &ParamSet,
    x: &Tensor,
    tape: &mut Tape,
    trainable: bool,
) -> Result<(crate::params::Bound, mocl_autodiff::Var)> {
    let frozen = backbone.params.bind(tape, false);
    let hb = head.bind(tape, trainable);
    let xv = tape.constant(x.clone());
    let feats = backbone.features(tape, &frozen, xv)?;
    let logits = linear(tape, feats, hb.var("weight"), hb.var("bias"))?;
    Ok((hb, logits))
}

/// One Adam step of the transfer head on labelled images; returns the loss before the step.
fn transfer_step(
    backbone: &Backbone,
    head: &mut ParamSet,
    opt: &mut Adam,
    x: &Tensor,
    y: &[usize],
    lr: Real,
) -> Result<Real> {
    let mut tape = Tape::new();
    let (hb, logits) = head_logits(backbone, head, x, &mut tape, true)?;
    let loss = tape.cross_entropy_with_logits(logits, y)?;
    let l = tape.value(loss).item();
    check_finite(l, "transfer loss", || "head fine-tuning".into())?;
    let grads = tape.backward(loss)?;
    let g = hb.gradients(&tape, &grads);
    opt.update(head, &g, lr);
    Ok(l)
}

/// Learner: a classifier architecture, a method and hyperparameters.
pub struct Learner {
    pub arch: ClassifierArch,
    pub method: Method,
    pub hp: HyperParams,
}

impl Learner {
    pub fn new(arch: ClassifierArch, method: Method, hp: HyperParams) -> Result<Self> {
        hp.validate()?;
        if arch.n_classes != hp.n_way {
            return Err(CoreError::Precondition(format!(
                "classifier has {} outputs but episodes are {}-way",
                arch.n_classes, hp.n_way
            )));
        }
        Ok(Self { arch, method, hp })
    }

    pub fn rule(&self) -> Option<&dyn UpdateRule> {
        match &self.method {
            Method::Meta(r) => Some(r.as_ref()),
            _ => None,
        }
    }

    /// Fresh state from the master seed.
    pub fn init_state(&self, master_seed: u64) -> Result<TrainerState> {
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, SeedTag::Init));
        let (mu, psi, w, opt_w) = match &self.method {
            Method::Transfer(backbone) => {
                let f = backbone.feature_width();
                let mut head = ParamSet::new();
                head.push("weight", kaiming_uniform(&mut init, &[f, self.hp.n_way], f));
                head.push("bias", Tensor::zeros(&[self.hp.n_way]));
                (head, ParamSet::new(), Vec::new(), None)
            }
            Method::Meta(rule) => {
                let p = self.arch.init(&mut init)?;
                let psi = rule.init_params(&mut init)?;
                (p.mu, psi, self.arch.weight_layout().flatten(&p.w)?, None)
            }
            Method::Maml => {
                let p = self.arch.init(&mut init)?;
                let w = self.arch.weight_layout().flatten(&p.w)?;
                let mut w_set = ParamSet::new();
                w_set.push("w", Tensor::vector(w.clone()));
                (
                    p.mu,
                    ParamSet::new(),
                    w,
                    Some(Adam::new(&w_set, self.hp.weight_decay)),
                )
            }
        };
        Ok(TrainerState {
            opt_mu: Adam::new(&mu, self.hp.weight_decay),
            opt_psi: Adam::new(&psi, self.hp.weight_decay),
            opt_w,
            running: self.arch.identity_stats(),
            mu,
            psi,
            w,
            schedule_step: 0,
            episode_rng: ChaCha8Rng::seed_from_u64(derive_seed(master_seed, SeedTag::Episode)),
            dropout_seed: derive_seed(master_seed, SeedTag::Dropout),
            dropout_counter: 0,
            task_cursor: 0,
            w_writes: 0,
        })
    }

    pub fn snapshot(&self, state: &TrainerState) -> Snapshot {
        Snapshot {
            task: state.task_cursor,
            mu: state.mu.clone(),
            psi: state.psi.clone(),
            w: state.w.clone(),
            running: state.running.clone(),
        }
    }

    /// Schedule of the ψ rate; `total_steps` is the run's step budget.
    pub fn psi_schedule(&self, total_steps: u64) -> WarmupLinearDecay {
        WarmupLinearDecay {
            base: self.hp.beta,
            warmup: self.hp.warmup_steps,
            horizon: self.hp.decay_horizon.unwrap_or(total_steps),
        }
    }

    fn adapt_options(&self, state: &TrainerState) -> AdaptOptions {
        AdaptOptions {
            q: self.hp.q_train,
            alpha: self.hp.alpha,
            keep_fraction: self.hp.keep_fraction,
            train: true,
            dropout_seed: state.dropout_seed,
            dropout_counter: state.dropout_counter,
        }
    }

    /// One outer update from episodes of the current task.
    pub fn outer_step(
        &self,
        state: &mut TrainerState,
        batches: &[Episode],
        total_steps: u64,
    ) -> Result<StepLog> {
        if batches.is_empty() {
            return Err(CoreError::Precondition(
                "outer step needs at least one episode".into(),
            ));
        }
        let step = state.schedule_step + 1;
        let lr_psi = self.psi_schedule(total_steps).rate(step);
        let lr_mu = match self.method {
            Method::Transfer(_) => self.hp.transfer_lr,
            _ => self.hp.beta,
        };
        let mut log = StepLog {
            step,
            task: state.task_cursor,
            inner_losses: Vec::new(),
            query_loss: 0.0,
            grad_norm: 0.0,
            lr_mu,
            lr_psi: if matches!(self.method, Method::Meta(_)) {
                lr_psi
            } else {
                0.0
            },
        };
        match &self.method {
            Method::Meta(rule) => {
                let mut g_mu = state.mu.zeros_like();
                let mut g_psi = state.psi.zeros_like();
                let mut last_w = None;
                let mut stats = Vec::new();
                for (b, ep) in batches.iter().enumerate() {
                    let opts = self.adapt_options(state);
                    let outcome = adapt_and_optimize(
                        &self.arch,
                        rule.as_ref(),
                        &state.mu,
                        &state.psi,
                        &state.w,
                        ep,
                        opts,
                    )?;
                    state.dropout_counter = state.dropout_counter.wrapping_add(opts.q as u64);
                    let mg = meta_gradient(&self.arch, rule.as_ref(), &outcome, ep)?;
                    if b == 0 {
                        log.inner_losses = outcome.inner_losses.clone();
                    }
                    log.query_loss += mg.query_loss;
                    g_mu.axpy(1.0, &mg.mu);
                    g_psi.axpy(1.0, &mg.psi);
                    stats = mg.batch_stats;
                    last_w = Some(outcome.w_tilde);
                }
                if let Some(name) = g_mu.first_non_finite().or_else(|| g_psi.first_non_finite()) {
                    return Err(CoreError::NonFinite {
                        what: "meta-gradient".into(),
                        location: format!("{name} at step {step}"),
                    });
                }
                log.grad_norm =
                    clip_global_norm(&mut [&mut g_mu, &mut g_psi], self.hp.grad_clip_norm);
                state.opt_mu.update(&mut state.mu, &g_mu, lr_mu);
                state.opt_psi.update(&mut state.psi, &g_psi, lr_psi);
                state.w = last_w.expect("nonempty batches");
                state.w_writes += 1;
                for (r, s) in state.running.iter_mut().zip(&stats) {
                    r.update_running(s, self.hp.bn_momentum);
                }
            }
            Method::Maml => {
                let mut g_mu = state.mu.zeros_like();
                let mut g_w = vec![0.0; state.w.len()];
                let mut stats = Vec::new();
                for (b, ep) in batches.iter().enumerate() {
                    let (mu_a, w_a, losses) = maml_inner(
                        &self.arch,
                        &state.mu,
                        &state.w,
                        ep,
                        self.hp.q_train,
                        self.hp.alpha,
                    )?;
                    if b == 0 {
                        log.inner_losses = losses;
                    }
                    let mut tape = Tape::new();
                    let mu_b = mu_a.bind(&mut tape, true);
                    let wv = tape.leaf(Tensor::vector(w_a));
                    let x = tape.constant(ep.query_x.clone());
                    let out = self
                        .arch
                        .forward_flat(&mut tape, &mu_b, wv, x, BnMode::Batch)?;
                    let loss = tape.cross_entropy_with_logits(out.logits, &ep.query_y)?;
                    let l = tape.value(loss).item();
                    check_finite(l, "query loss", || format!("step {step}"))?;
                    log.query_loss += l;
                    let mut grads = tape.backward(loss)?;
                    g_mu.axpy(1.0, &mu_b.gradients(&tape, &grads));
                    for (a, g) in g_w.iter_mut().zip(grads.take(wv).expect("leaf").data()) {
                        *a += g;
                    }
                    stats = out.batch_stats;
                }
                let mut g_w_set = ParamSet::new();
                g_w_set.push("w", Tensor::vector(g_w));
                if let Some(name) = g_mu
                    .first_non_finite()
                    .or_else(|| g_w_set.first_non_finite())
                {
                    return Err(CoreError::NonFinite {
                        what: "meta-gradient".into(),
                        location: format!("{name} at step {step}"),
                    });
                }
                log.grad_norm =
                    clip_global_norm(&mut [&mut g_mu, &mut g_w_set], self.hp.grad_clip_norm);
                state.opt_mu.update(&mut state.mu, &g_mu, lr_mu);
                let mut w_set = ParamSet::new();
                w_set.push("w", Tensor::vector(std::mem::take(&mut state.w)));
                state
                    .opt_w
                    .as_mut()
                    .expect("MAML state has a W optimizer")
                    .update(&mut w_set, &g_w_set, lr_mu);
                state.w = w_set.get("w").expect("pushed").data().to_vec();
                for (r, s) in state.running.iter_mut().zip(&stats) {
                    r.update_running(s, self.hp.bn_momentum);
                }
            }
            Method::Transfer(backbone) => {
                for ep in batches {
                    let l = transfer_step(
                        backbone,
                        &mut state.mu,
                        &mut state.opt_mu,
                        &ep.support_x,
                        &ep.support_y,
                        lr_mu,
                    )?;
                    log.inner_losses.push(l);
                    let mut tape = Tape::no_grad();
                    let (_, logits) =
                        head_logits(backbone, &state.mu, &ep.query_x, &mut tape, false)?;
                    log.query_loss += tape
                        .cross_entropy_with_logits(logits, &ep.query_y)
                        .map(|v| tape.value(v).item())?;
                }
            }
        }
        state.schedule_step = step;
        Ok(log)
    }

    /// Test-time adaptation of a snapshot copy on a labelled support set.
    pub fn adapt_for_inference(
        &self,
        snapshot: &Snapshot,
        support: &Episode,
        q_test: usize,
    ) -> Result<Adapted> {
        match &self.method {
            Method::Meta(rule) => {
                let opts = inference_options(&self.hp, q_test, 0);
                let out = adapt_and_optimize(
                    &self.arch,
                    rule.as_ref(),
                    &snapshot.mu,
                    &snapshot.psi,
                    &snapshot.w,
                    support,
                    opts,
                )?;
                Ok(Adapted {
                    mu: out.mu,
                    w: out.w_tilde,
                })
            }
            Method::Maml => {
                let (mu, w, _) = maml_inner(
                    &self.arch,
                    &snapshot.mu,
                    &snapshot.w,
                    support,
                    q_test,
                    self.hp.alpha,
                )?;
                Ok(Adapted { mu, w })
            }
            Method::Transfer(backbone) => {
                let mut head = snapshot.mu.clone();
                let mut opt = Adam::new(&head, self.hp.weight_decay);
                for _ in 0..q_test {
                    transfer_step(
                        backbone,
                        &mut head,
                        &mut opt,
                        &support.support_x,
                        &support.support_y,
                        self.hp.transfer_lr,
                    )?;
                }
                Ok(Adapted {
                    mu: head,
                    w: Vec::new(),
                })
            }
        }
    }

    /// Logits `[B, N]` of an adapted model; batch-norm uses the batch statistics.
    pub fn logits(&self, adapted: &Adapted, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let logits = match &self.method {
            Method::Transfer(backbone) => {
                head_logits(backbone, &adapted.mu, x, &mut tape, false)?.1
            }
            _ => {
                let mu_b = adapted.mu.bind(&mut tape, false);
                let wv = tape.constant(Tensor::vector(adapted.w.clone()));
                let xv = tape.constant(x.clone());
                self.arch
                    .forward_flat(&mut tape, &mu_b, wv, xv, BnMode::Batch)?
                    .logits
            }
        };
        Ok(tape.value(logits).clone())
    }

    /// Samples `batches_per_step` episodes from `task` with the state's episode stream.
    pub fn sample_batches(&self, state: &mut TrainerState, task: &Task) -> Result<Vec<Episode>> {
        (0..self.hp.batches_per_step)
            .map(|_| {
                sample_episode(
                    task,
                    self.hp.k_shot,
                    self.hp.query_size(),
                    &mut state.episode_rng,
                )
            })
            .collect()
    }

    /// Trains through the stream from `state`, snapshotting at every task boundary.
    pub fn train_stream(
        &self,
        state: &mut TrainerState,
        tasks: &[Task],
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<Snapshot>> {
        crate::streams::check_episode_capacity(tasks, self.hp.k_shot, self.hp.query_size(), false)?;
        let total = (tasks.len() * self.hp.outer_steps_per_task) as u64;
        let mut snapshots = Vec::with_capacity(tasks.len());
        for (m, task) in tasks.iter().enumerate().skip(state.task_cursor) {
            state.task_cursor = m;
            for _ in 0..self.hp.outer_steps_per_task {
                let batches = self.sample_batches(state, task)?;
                let log = self.outer_step(state, &batches, total)?;
                on_step(&log);
            }
            snapshots.push(self.snapshot(state));
        }
        state.task_cursor = tasks.len();
        Ok(snapshots)
    }
}

/// Output of [`meta_train_stream`].
pub struct TrainedRun {
    pub state: TrainerState,
    pub snapshots: Vec<Snapshot>,
    pub log: Vec<StepLog>,
}

/// Fresh state from `seed`, then training through every task of the stream.
pub fn meta_train_stream(learner: &Learner, tasks: &[Task], seed: u64) -> Result<TrainedRun> {
    let mut state = learner.init_state(seed)?;
    let mut log = Vec::new();
    let snapshots = learner.train_stream(&mut state, tasks, |l| log.push(l.clone()))?;
    Ok(TrainedRun {
        state,
        snapshots,
        log,
    })
}
