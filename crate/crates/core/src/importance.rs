//! Importance scores from support-set gradients and the weight-token layout.

use mocl_autodiff::Real;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layers::WeightLayout;

/// Default fraction of scores kept after thresholding.
pub const KEEP_FRACTION: Real = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    /// Normalized scores aligned with the flat W; zero where not kept.
    pub values: Vec<Real>,
    pub kept_mask: Vec<bool>,
}

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.kept_mask.iter().filter(|&&k| k).count()
    }

    /// All-zero scores with nothing kept; stands in when scores are ablated.
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            kept_mask: vec![false; len],
        }
    }
}

/// Number of survivors for `r` entries.
pub fn kept_count(r: usize, keep_fraction: Real) -> usize {
    ((keep_fraction * r as Real).ceil() as usize).min(r)
}

/// Absolute value, global min-max normalization, then top-fraction thresholding
/// with ties broken by ascending index.
pub fn normalize_and_threshold(
    grad: &[Real],
    layout: &WeightLayout,
    keep_fraction: Real,
) -> Result<ImportanceScores> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(CoreError::NonFinite {
            what: "weight gradient".into(),
            location: layout.layer_of(i).to_string(),
        });
    }
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(CoreError::Precondition(format!(
            "keep fraction {keep_fraction} outside [0, 1]"
        )));
    }
    let raw: Vec<Real> = grad.iter().map(|g| g.abs()).collect();
    let r = raw.len();
    let lo = raw.iter().copied().fold(Real::INFINITY, Real::min);
    let hi = raw.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if r == 0 || lo == hi {
        return Ok(ImportanceScores {
            values: vec![1.0; r],
            kept_mask: vec![true; r],
        });
    }
    let span = hi - lo;
    let norm: Vec<Real> = raw
        .iter()
        .map(|v| if *v == hi { 1.0 } else { (v - lo) / span })
        .collect();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| norm[b].total_cmp(&norm[a]).then(a.cmp(&b)));
    let mut kept_mask = vec![false; r];
    for &i in &order[..kept_count(r, keep_fraction)] {
        kept_mask[i] = true;
    }
    let values = norm
        .iter()
        .zip(&kept_mask)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    Ok(ImportanceScores { values, kept_mask })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// One scalar weight per token.
    Sequential,
    /// One k×k kernel per token.
    Spatial,
}

impl Allocation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sequential => "sequential",
            Self::Spatial => "spatial",
        }
    }
}

/// Weights and scores laid out as transformer tokens. Token `t` covers the flat
/// range `[t·width, (t+1)·width)`; the ranges tile `[0, R)` in order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTokens {
    pub mode: Allocation,
    /// Weight sub-vector width (1 or k²).
    pub width: usize,
    /// `[T · width]` row-major.
    pub weights: Vec<Real>,
    /// `[T · width]` row-major.
    pub scores: Vec<Real>,
}

impl WeightTokens {
    pub fn count(&self) -> usize {
        self.weights.len() / self.width
    }

    /// Flat index range covered by token `t`.
    pub fn origin(&self, t: usize) -> std::ops::Range<usize> {
        t * self.width..(t + 1) * self.width
    }
}

/// Sub-vector width for an allocation mode over a layout.
pub fn token_width(layout: &WeightLayout, mode: Allocation) -> Result<usize> {
    match mode {
        Allocation::Sequential => Ok(1),
        Allocation::Spatial => {
            let first = layout
                .kernels
                .first()
                .ok_or_else(|| CoreError::Precondition("empty weight layout".into()))?;
            for k in &layout.kernels {
                if k.kh != k.kw {
                    return Err(CoreError::Precondition(format!(
                        "kernel {} is {}×{}, not square",
                        k.name, k.kh, k.kw
                    )));
                }
                if k.kh != first.kh {
                    return Err(CoreError::Precondition(format!(
                        "spatial allocation needs one kernel size, found {} and {}",
                        first.kh, k.kh
                    )));
                }
            }
            Ok(first.kh * first.kw)
        }
    }
}

pub fn tokenize(
    w: &[Real],
    scores: &ImportanceScores,
    layout: &WeightLayout,
    mode: Allocation,
) -> Result<WeightTokens> {
    let r = layout.total();
    if w.len() != r || scores.len() != r {
        return Err(CoreError::Precondition(format!(
            "W has {} and scores {} entries, layout expects {r}",
            w.len(),
            scores.len()
        )));
    }
    let width = token_width(layout, mode)?;
    let score_sub = match mode {
        Allocation::Sequential => scores.values.clone(),
        Allocation::Spatial => scores
            .values
            .chunks_exact(width)
            .flat_map(|c| {
                let mean = c.iter().sum::<Real>() / width as Real;
                std::iter::repeat_n(mean, width)
            })
            .collect(),
    };
    Ok(WeightTokens {
        mode,
        width,
        weights: w.to_vec(),
        scores: score_sub,
    })
}

/// Scatters per-token updates `[T · width]` back to a flat ΔW of length R.
pub fn reassemble(
    tokens: &WeightTokens,
    updates: &[Real],
    update_width: usize,
) -> Result<Vec<Real>> {
    if update_width != tokens.width || updates.len() != tokens.weights.len() {
        return Err(CoreError::Precondition(format!(
            "updates of width {update_width} ({} values) do not match tokens of width {} ({} values)",
            updates.len(),
            tokens.width,
            tokens.weights.len()
        )));
    }
    let mut out = vec![0.0; tokens.weights.len()];
    for t in 0..tokens.count() {
        let range = tokens.origin(t);
        out[range.clone()].copy_from_slice(&updates[range]);
    }
    Ok(out)
}

/// Zeros ΔW outside the kept mask when `hard_mask` is set.
pub fn apply_mask(delta: &mut [Real], kept_mask: &[bool], hard_mask: bool) {
    debug_assert_eq!(delta.len(), kept_mask.len());
    if hard_mask {
        for (d, &k) in delta.iter_mut().zip(kept_mask) {
            if !k {
                *d = 0.0;
            }
        }
    }
}
