//! Forward and vector-Jacobian kernels on raw row-major buffers.
//!
//! Everything here is shape-checked by the caller in `tape.rs`.

use crate::Real;

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m,k]ᵀ · g[m,n]` → `[k,n]`
pub(crate) fn matmul_tn(a: &[Real], g: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `g[m,n] · b[k,n]ᵀ` → `[m,k]`
pub(crate) fn matmul_nt(g: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Input coordinate for output `o` and tap `t`, or `None` inside the zero padding.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn conv2d(x: &[Real], w: &[Real], g: &ConvGeom) -> Vec<Real> {
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
    let plane = g.height * g.width;
    let oplane = g.out_h * g.out_w;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let obase = (b * g.out_ch + o) * oplane;
            for c in 0..g.in_ch {
                let xbase = (b * g.in_ch + c) * plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..g.out_h {
                            let Some(iy) = g.src(oy, ky, g.height) else {
                                continue;
                            };
                            for ox in 0..g.out_w {
                                if let Some(ix) = g.src(ox, kx, g.width) {
                                    out[obase + oy * g.out_w + ox] +=
                                        wv * x[xbase + iy * g.width + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (dx, dw).
pub(crate) fn conv2d_backward(
    x: &[Real],
    w: &[Real],
    gout: &[Real],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Vec<Real>, Vec<Real>) {
    let mut dx = if need_dx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut dw = if need_dw {
        vec![0.0; w.len()]
    } else {
        Vec::new()
    };
    let plane = g.height * g.width;
    let oplane = g.out_h * g.out_w;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let obase = (b * g.out_ch + o) * oplane;
            for c in 0..g.in_ch {
                let xbase = (b * g.in_ch + c) * plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((o * g.in_ch + c) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for oy in 0..g.out_h {
                            let Some(iy) = g.src(oy, ky, g.height) else {
                                continue;
                            };
                            for ox in 0..g.out_w {
                                if let Some(ix) = g.src(ox, kx, g.width) {
                                    let go = gout[obase + oy * g.out_w + ox];
                                    let xi = xbase + iy * g.width + ix;
                                    acc += go * x[xi];
                                    if need_dx {
                                        dx[xi] += go * wv;
                                    }
                                }
                            }
                        }
                        if need_dw {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// 2×2 max pooling with stride 2 (floor). Returns output and flat argmax per output.
pub(crate) fn maxpool2x2(x: &[Real], planes: usize, h: usize, w: usize) -> (Vec<Real>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Statistics over channel axis 1 of a `[B, C, ...]` buffer.
pub(crate) fn channel_moments(
    x: &[Real],
    batch: usize,
    ch: usize,
    spatial: usize,
) -> (Vec<Real>, Vec<Real>) {
    let n = (batch * spatial) as Real;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for b in 0..batch {
            let base = (b * ch + c) * spatial;
            s += x[base..base + spatial].iter().sum::<Real>();
        }
        let m = s / n;
        let mut v = 0.0;
        for b in 0..batch {
            let base = (b * ch + c) * spatial;
            v += x[base..base + spatial]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<Real>();
        }
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

/// Normalization backward for one group of `n` entries sharing statistics:
/// `dx = inv_std / n · (n·d − Σd − x̂·Σ(d·x̂))` where `d = dL/dx̂`.
pub(crate) fn normalize_backward(dxhat: &[Real], xhat: &[Real], inv_std: Real, out: &mut [Real]) {
    let n = dxhat.len() as Real;
    let sd: Real = dxhat.iter().sum();
    let sdx: Real = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
    for ((o, d), xh) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o += inv_std / n * (n * d - sd - xh * sdx);
    }
}

pub(crate) fn softmax(x: &[Real], outer: usize, n: usize, inner: usize) -> Vec<Real> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for k in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + k;
            let mx = (0..n)
                .map(|i| x[idx(i)])
                .fold(Real::NEG_INFINITY, Real::max);
            let mut s = 0.0;
            for i in 0..n {
                let e = (x[idx(i)] - mx).exp();
                y[idx(i)] = e;
                s += e;
            }
            for i in 0..n {
                y[idx(i)] /= s;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(
    y: &[Real],
    g: &[Real],
    outer: usize,
    n: usize,
    inner: usize,
) -> Vec<Real> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for k in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + k;
            let dot: Real = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
            for i in 0..n {
                dx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
            }
        }
    }
    dx
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: Real) -> Real {
    let xf = x as f64;
    (0.5 * xf * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2))) as Real
}

pub(crate) fn gelu_grad(x: Real) -> Real {
    let xf = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(xf * std::f64::consts::FRAC_1_SQRT_2));
    (cdf + xf * FRAC_1_SQRT_2PI * (-0.5 * xf * xf).exp()) as Real
}

/// SplitMix64 finalizer; the mixing step behind every counter-based draw.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) addressed by (seed, counter, index).
pub(crate) fn counter_uniform(seed: u64, counter: u64, index: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(counter ^ splitmix64(index)));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
