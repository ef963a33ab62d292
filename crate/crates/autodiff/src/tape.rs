//! The recording tape and every differentiable primitive.
//!
//! A [`Tape`] owns the values of every tensor created during one forward pass.
//! When recording, each primitive whose inputs require gradients appends a
//! record; [`Tape::backward`] walks those records in exact reverse order.

use crate::kernels::{self, ConvGeom};
use crate::tensor::axis_split;
use crate::{AutodiffError, Real, Result, Tensor};

/// Handle to a tensor living on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-normalization statistics for one layer (per channel).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

impl BatchStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average: `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running(&mut self, batch: &BatchStats, momentum: Real) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Statistics of the current batch.
    Batch,
    /// Stored running statistics.
    Running(&'a BatchStats),
}

/// Addresses one dropout mask in the counter-based stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Debug)]
enum Op {
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        batch_stats: bool,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    LeakyRelu {
        x: usize,
        slope: Real,
    },
    Gelu(usize),
    Tanh(usize),
    Scale(usize, Real),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Mean {
        x: usize,
        axis: usize,
    },
    Sum(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<Real>,
    },
    Dropout {
        x: usize,
        mask: Vec<Real>,
    },
    EmbeddingAdd {
        x: usize,
        table: usize,
    },
    Reshape(usize),
    Transpose(usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    leaf: bool,
}

#[derive(Debug)]
struct Record {
    out: usize,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
    recording: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            records: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that evaluates values only; no record is ever appended.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of primitive records appended so far.
    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// Registers a tensor that gradients are accumulated for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.push_node(value, requires_grad, true)
    }

    /// Registers a tensor that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, leaf: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[usize], op: Op) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let v = self.push_node(value, requires_grad, false);
        if requires_grad {
            self.records.push(Record { out: v.0, op });
        }
        v
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.val(a).data(), self.val(b).data(), m, k, n);
        Ok(self.push_op(
            Tensor::from_parts(vec![m, n], out),
            &[a.0, b.0],
            Op::MatMul(a.0, b.0),
        ))
    }

    /// `[N,C,H,W] ⊛ [O,C,kh,kw]` with zero padding, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(AutodiffError::InvalidAttribute {
                op: "conv2d",
                detail: "stride must be ≥ 1".into(),
            });
        }
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(mismatch("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(mismatch(
                "conv2d",
                format!("kernel {sw:?} larger than padded input {sx:?} (pad {pad})"),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            out_w: (sx[3] + 2 * pad - sw[3]) / stride + 1,
        };
        let out = kernels::conv2d(self.val(x).data(), self.val(w).data(), &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w];
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            &[x.0, w.0],
            Op::Conv2d {
                x: x.0,
                w: w.0,
                geom,
            },
        ))
    }

    /// 2×2 max pooling with stride 2 over the last two axes of `[N,C,H,W]`.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(mismatch("maxpool2x2", format!("{s:?}")));
        }
        let (out, argmax) = kernels::maxpool2x2(self.val(x).data(), s[0] * s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            &[x.0],
            Op::MaxPool { x: x.0, argmax },
        ))
    }

    /// Batch normalization over channel axis 1 of `[N,C,...]`, with affine `gamma`, `beta`.
    ///
    /// In [`NormMode::Batch`] the batch statistics are returned so the caller can
    /// maintain running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: Real,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(mismatch(
                "batchnorm",
                format!("input {s:?} has no channel axis"),
            ));
        }
        let (batch, ch) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(mismatch(
                    "batchnorm",
                    format!("affine {:?} vs {ch} channels", self.shape(p)),
                ));
            }
        }
        let xd = self.val(x).data();
        let (stats, batch_stats) = match mode {
            NormMode::Batch => {
                let (mean, var) = kernels::channel_moments(xd, batch, ch, spatial);
                (BatchStats { mean, var }, true)
            }
            NormMode::Running(r) => {
                if r.mean.len() != ch || r.var.len() != ch {
                    return Err(mismatch(
                        "batchnorm",
                        format!("running stats for {} channels vs {ch}", r.mean.len()),
                    ));
                }
                (r.clone(), false)
            }
        };
        let inv_std: Vec<Real> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * spatial;
                for i in base..base + spatial {
                    xhat[i] = (xd[i] - stats.mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let v = self.push_op(
            Tensor::from_parts(s, out),
            &[x.0, gamma.0, beta.0],
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, batch_stats.then_some(stats)))
    }

    /// Layer normalization over the last axis, with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| mismatch("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(mismatch(
                    "layer_norm",
                    format!("affine {:?} vs width {d}", self.shape(p)),
                ));
            }
        }
        let xd = self.val(x).data();
        let (g, bt) = (self.val(gamma).data(), self.val(beta).data());
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let xh = (row[i] - mean) * is;
                xhat[r * d + i] = xh;
                out[r * d + i] = g[i] * xh + bt[i];
            }
        }
        Ok(self.push_op(
            Tensor::from_parts(s, out),
            &[x.0, gamma.0, beta.0],
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    // ---------------------------------------------------------------- pointwise

    pub fn leaky_relu(&mut self, x: Var, slope: Real) -> Result<Var> {
        let out = self.val(x).map(|v| if v > 0.0 { v } else { slope * v });
        Ok(self.push_op(out, &[x.0], Op::LeakyRelu { x: x.0, slope }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(kernels::gelu);
        Ok(self.push_op(out, &[x.0], Op::Gelu(x.0)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(Real::tanh);
        Ok(self.push_op(out, &[x.0], Op::Tanh(x.0)))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var> {
        let out = self.val(x).map(|v| c * v);
        Ok(self.push_op(out, &[x.0], Op::Scale(x.0, c)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_op(out, &[a.0, b.0], Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_op(out, &[a.0, b.0], Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_op(out, &[a.0, b.0], Op::Mul(a.0, b.0)))
    }

    /// Adds a 1-D `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || self.shape(bias) != [s[axis]] {
            return Err(mismatch(
                "add_bias",
                format!("bias {:?} on axis {axis} of {s:?}", self.shape(bias)),
            ));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let bd = self.val(bias).data();
        let mut out = self.val(x).data().to_vec();
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bd[i];
                }
            }
        }
        Ok(self.push_op(
            Tensor::from_parts(s, out),
            &[x.0, bias.0],
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                axis,
            },
        ))
    }

    /// Inverted dropout. `train == false` is the identity.
    pub fn dropout(&mut self, x: Var, p: Real, key: DropoutKey, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidAttribute {
                op: "dropout",
                detail: format!("p = {p} not in [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let n = self.val(x).numel();
        let mask: Vec<Real> = (0..n as u64)
            .map(|i| {
                if kernels::counter_uniform(key.seed, key.counter, i) >= p as f64 {
                    keep_scale
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.val(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push_op(out, &[x.0], Op::Dropout { x: x.0, mask }))
    }

    // ---------------------------------------------------------------- structure

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(mismatch(
                "concat",
                format!("axis {axis} for rank {}", s0.len()),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch(
                    "concat",
                    format!("{s:?} vs {s0:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.val(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            &ids,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
        ))
    }

    /// Mean along `axis`; the axis is removed (rank-1 inputs give shape `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(mismatch("mean", format!("axis {axis} for {s:?}")));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let xd = self.val(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for k in 0..inner {
                    out[o * inner + k] += xd[(o * n + i) * inner + k];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as Real);
        let mut shape: Vec<usize> = s
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &e)| e)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            &[x.0],
            Op::Mean { x: x.0, axis },
        ))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.val(x).sum();
        Ok(self.push_op(Tensor::scalar(total), &[x.0], Op::Sum(x.0)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(mismatch("softmax", format!("axis {axis} for {s:?}")));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let y = kernels::softmax(self.val(x).data(), outer, n, inner);
        Ok(self.push_op(
            Tensor::from_parts(s, y),
            &[x.0],
            Op::Softmax { x: x.0, axis },
        ))
    }

    /// Mean cross-entropy of `[B,N]` logits against integer labels.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch(
                "cross_entropy_with_logits",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (b, n) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(AutodiffError::InvalidAttribute {
                op: "cross_entropy_with_logits",
                detail: format!("label {bad} out of range for {n} classes"),
            });
        }
        let probs = kernels::softmax(self.val(logits).data(), b, n, 1);
        let ld = self.val(logits).data();
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &ld[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<Real>().ln();
            loss += lse - row[l];
        }
        loss /= b as Real;
        Ok(self.push_op(
            Tensor::scalar(loss),
            &[logits.0],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `x[T,D] + table[0..T, D]` for a positional table of capacity ≥ T.
    pub fn embedding_add(&mut self, x: Var, table: Var) -> Result<Var> {
        let (sx, st) = (self.shape(x).to_vec(), self.shape(table).to_vec());
        if sx.len() != 2 || st.len() != 2 || sx[1] != st[1] || sx[0] > st[0] {
            return Err(mismatch(
                "embedding_add",
                format!("tokens {sx:?} vs table {st:?}"),
            ));
        }
        let n = sx[0] * sx[1];
        let td = &self.val(table).data()[..n];
        let data = self
            .val(x)
            .data()
            .iter()
            .zip(td)
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.push_op(
            Tensor::from_parts(sx, data),
            &[x.0, table.0],
            Op::EmbeddingAdd {
                x: x.0,
                table: table.0,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(mismatch("reshape", format!("{:?} → {shape:?}", t.shape())));
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        Ok(self.push_op(out, &[x.0], Op::Reshape(x.0)))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch("transpose", format!("{s:?} is not rank 2")));
        }
        let (m, n) = (s[0], s[1]);
        let xd = self.val(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        Ok(self.push_op(
            Tensor::from_parts(vec![n, m], out),
            &[x.0],
            Op::Transpose(x.0),
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(mismatch(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push_op(
            Tensor::from_parts(shape, out),
            &[x.0],
            Op::Slice {
                x: x.0,
                axis,
                start,
            },
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: s.to_vec() });
        }
        self.backward_from(loss, Tensor::ones(&s.to_vec()))
    }

    /// Vector-Jacobian product seeded with `cotangent` at `output`. Consumes the tape.
    pub fn backward_from(&mut self, output: Var, cotangent: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if cotangent.shape() != self.shape(output) {
            return Err(mismatch(
                "backward",
                format!(
                    "cotangent {:?} vs output {:?}",
                    cotangent.shape(),
                    self.shape(output)
                ),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(cotangent);
        }
        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            let Some(g) = grads[rec.out].take() else {
                continue;
            };
            self.vjp(rec, &g, &mut grads);
        }
        self.records = records;
        let mut leaf_grads = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.leaf && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaf_grads.push((Var(i), Some(g)));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn vjp(&self, rec: &Record, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.nodes[rec.out].value;
        let like = |idx: usize, data: Vec<Real>| {
            Tensor::from_parts(self.nodes[idx].value.shape().to_vec(), data)
        };
        let needs = |idx: usize| self.nodes[idx].requires_grad;
        match &rec.op {
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let da = kernels::matmul_nt(gd, self.nodes[*b].value.data(), m, k, n);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if needs(*b) {
                    let db = kernels::matmul_tn(self.nodes[*a].value.data(), gd, m, k, n);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    gd,
                    geom,
                    needs(*x),
                    needs(*w),
                );
                if needs(*x) {
                    self.accumulate(grads, *x, like(*x, dx));
                }
                if needs(*w) {
                    self.accumulate(grads, *w, like(*w, dw));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for (&src, gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.nodes[*x].value.shape();
                let (batch, ch) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let gam = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                let mut dx = vec![0.0; gd.len()];
                for c in 0..ch {
                    let mut dxhat = Vec::with_capacity(batch * spatial);
                    let mut xh = Vec::with_capacity(batch * spatial);
                    for b in 0..batch {
                        let base = (b * ch + c) * spatial;
                        for i in base..base + spatial {
                            dgamma[c] += gd[i] * xhat[i];
                            dbeta[c] += gd[i];
                            dxhat.push(gd[i] * gam[c]);
                            xh.push(xhat[i]);
                        }
                    }
                    if needs(*x) {
                        if *batch_stats {
                            let mut dxc = vec![0.0; dxhat.len()];
                            kernels::normalize_backward(&dxhat, &xh, inv_std[c], &mut dxc);
                            let mut it = dxc.into_iter();
                            for b in 0..batch {
                                let base = (b * ch + c) * spatial;
                                for slot in &mut dx[base..base + spatial] {
                                    *slot = it.next().unwrap_or(0.0);
                                }
                            }
                        } else {
                            let mut it = dxhat.into_iter();
                            for b in 0..batch {
                                let base = (b * ch + c) * spatial;
                                for slot in &mut dx[base..base + spatial] {
                                    *slot = it.next().unwrap_or(0.0) * inv_std[c];
                                }
                            }
                        }
                    }
                }
                if needs(*x) {
                    self.accumulate(grads, *x, like(*x, dx));
                }
                self.accumulate(grads, *gamma, like(*gamma, dgamma));
                self.accumulate(grads, *beta, like(*beta, dbeta));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[*gamma].value.numel();
                let gam = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; gd.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let dxhat: Vec<Real> = gd[span.clone()]
                        .iter()
                        .zip(gam)
                        .map(|(a, b)| a * b)
                        .collect();
                    for i in 0..d {
                        dgamma[i] += gd[r * d + i] * xhat[r * d + i];
                        dbeta[i] += gd[r * d + i];
                    }
                    kernels::normalize_backward(&dxhat, &xhat[span.clone()], is, &mut dx[span]);
                }
                self.accumulate(grads, *x, like(*x, dx));
                self.accumulate(grads, *gamma, like(*gamma, dgamma));
                self.accumulate(grads, *beta, like(*beta, dbeta));
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.nodes[*x].value.data();
                let dx = xd
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Gelu(x) => {
                let xd = self.nodes[*x].value.data();
                let dx = xd
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| kernels::gelu_grad(v) * gv)
                    .collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Tanh(x) => {
                let dx = out
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| (1.0 - y * y) * gv)
                    .collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, like(*x, gd.iter().map(|v| c * v).collect()));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bd = self.nodes[*b].value.data();
                    self.accumulate(
                        grads,
                        *a,
                        like(*a, gd.iter().zip(bd).map(|(x, y)| x * y).collect()),
                    );
                }
                if needs(*b) {
                    let ad = self.nodes[*a].value.data();
                    self.accumulate(
                        grads,
                        *b,
                        like(*b, gd.iter().zip(ad).map(|(x, y)| x * y).collect()),
                    );
                }
            }
            Op::AddBias { x, bias, axis } => {
                self.accumulate(grads, *x, g.clone());
                if needs(*bias) {
                    let (outer, n, inner) = axis_split(g.shape(), *axis);
                    let mut db = vec![0.0; n];
                    for o in 0..outer {
                        for (i, slot) in db.iter_mut().enumerate() {
                            let base = (o * n + i) * inner;
                            *slot += gd[base..base + inner].iter().sum::<Real>();
                        }
                    }
                    self.accumulate(grads, *bias, like(*bias, db));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &inp in inputs {
                    let n = self.nodes[inp].value.shape()[*axis];
                    if needs(inp) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        self.accumulate(grads, inp, like(inp, d));
                    }
                    offset += n;
                }
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for k in 0..inner {
                            dx[(o * n + i) * inner + k] = gd[o * inner + k] / n as Real;
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.numel();
                self.accumulate(grads, *x, like(*x, vec![gd[0]; n]));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let dx = kernels::softmax_backward(out.data(), gd, outer, n, inner);
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = probs.len() / labels.len();
                let scale = gd[0] / labels.len() as Real;
                let mut dx: Vec<Real> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * n + l] -= scale;
                }
                self.accumulate(grads, *logits, like(*logits, dx));
            }
            Op::Dropout { x, mask } => {
                self.accumulate(
                    grads,
                    *x,
                    like(*x, gd.iter().zip(mask).map(|(a, b)| a * b).collect()),
                );
            }
            Op::EmbeddingAdd { x, table } => {
                self.accumulate(grads, *x, g.clone());
                if needs(*table) {
                    let mut dt = vec![0.0; self.nodes[*table].value.numel()];
                    dt[..gd.len()].copy_from_slice(gd);
                    self.accumulate(grads, *table, like(*table, dt));
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, like(*x, gd.to_vec()));
            }
            Op::Transpose(x) => {
                let s = g.shape();
                let (n, m) = (s[0], s[1]);
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = gd[j * m + i];
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
        }
    }
}

/// Gradients of every gradient-requiring leaf after a backward sweep.
///
/// Leaves unreachable from the loss carry an all-zero gradient; constants carry none.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<(Var, Option<Tensor>)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads
            .binary_search_by_key(&v, |(k, _)| *k)
            .ok()
            .and_then(|i| self.grads[i].1.as_ref())
    }

    /// Moves a leaf gradient out, leaving nothing behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let i = self.grads.binary_search_by_key(&v, |(k, _)| *k).ok()?;
        self.grads[i].1.take()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
