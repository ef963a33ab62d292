//! Fixed optimizers of the outer loop: Adam, the warmup/linear-decay schedule,
//! and global gradient-norm clipping.

use mocl_autodiff::Real;

use crate::params::ParamSet;

/// Adam with coupled L2 weight decay (the decay term is added to the gradient).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(like: &ParamSet, weight_decay: Real) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: Real) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let iter = params
            .tensors_mut()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, m), v), (_, g)) in iter.zip(grads.iter()) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] + wd * p[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup to `base` over `warmup` steps, then linear decay to zero at `horizon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupLinearDecay {
    pub base: Real,
    pub warmup: u64,
    pub horizon: u64,
}

impl WarmupLinearDecay {
    /// Rate for the 1-indexed step `s`.
    pub fn rate(&self, s: u64) -> Real {
        if self.warmup > 0 && s <= self.warmup {
            return self.base * s as Real / self.warmup as Real;
        }
        if self.horizon <= self.warmup || s >= self.horizon {
            return 0.0;
        }
        self.base * (self.horizon - s) as Real / (self.horizon - self.warmup) as Real
    }
}

/// Rescales all sets jointly so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(sets: &mut [&mut ParamSet], max_norm: Real) -> Real {
    let norm = sets.iter().map(|s| s.squared_norm()).sum::<Real>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for s in sets.iter_mut() {
            s.scale(c);
        }
    }
    norm
}
