//! Differentiable tensor operations.
//!
//! Every op computes its output eagerly, then registers a closure with the
//! tape that routes the output gradient to each tracked input (accumulating,
//! never overwriting). Convolutions lower to GEMM via `kernels`; depthwise
//! convolutions take a direct loop path instead, which is faster than
//! degenerate one-row GEMMs.

use super::kernels::{col2im_add, im2col, matmul, matmul_nt, matmul_tn, ConvGeom};
use super::{Shape, Tape, Tensor};
use crate::error::TensorError;
use crate::scalar::Scalar;

// ── Elementwise ──────────────────────────────────────────────────────────────

fn assert_same_shape<F: Scalar>(op: &str, a: &Tensor<F>, b: &Tensor<F>) {
    assert_eq!(a.shape(), b.shape(), "{op}: shapes {} vs {}", a.shape(), b.shape());
}

pub fn add<F: Scalar>(tape: &mut Tape<F>, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_same_shape("add", a, b);
    let y: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &z)| x + z).collect();
    let (ac, bc) = (a.clone(), b.clone());
    let tracked = a.requires_grad() || b.requires_grad();
    tape.record(y, a.shape(), tracked, move |dy, ctx| {
        for t in [&ac, &bc] {
            if let Some(id) = t.node() {
                ctx.with_grad(id, t.len(), |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi += d;
                    }
                });
            }
        }
    })
}

pub fn sub<F: Scalar>(tape: &mut Tape<F>, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_same_shape("sub", a, b);
    let y: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &z)| x - z).collect();
    let (ac, bc) = (a.clone(), b.clone());
    let tracked = a.requires_grad() || b.requires_grad();
    tape.record(y, a.shape(), tracked, move |dy, ctx| {
        if let Some(id) = ac.node() {
            ctx.with_grad(id, ac.len(), |g| {
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi += d;
                }
            });
        }
        if let Some(id) = bc.node() {
            ctx.with_grad(id, bc.len(), |g| {
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi -= d;
                }
            });
        }
    })
}

pub fn mul<F: Scalar>(tape: &mut Tape<F>, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_same_shape("mul", a, b);
    let y: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &z)| x * z).collect();
    let (ac, bc) = (a.clone(), b.clone());
    let tracked = a.requires_grad() || b.requires_grad();
    tape.record(y, a.shape(), tracked, move |dy, ctx| {
        if let Some(id) = ac.node() {
            ctx.with_grad(id, ac.len(), |g| {
                for ((gi, &d), &z) in g.iter_mut().zip(dy).zip(bc.data()) {
                    *gi += d * z;
                }
            });
        }
        if let Some(id) = bc.node() {
            ctx.with_grad(id, bc.len(), |g| {
                for ((gi, &d), &x) in g.iter_mut().zip(dy).zip(ac.data()) {
                    *gi += d * x;
                }
            });
        }
    })
}

pub fn div<F: Scalar>(tape: &mut Tape<F>, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_same_shape("div", a, b);
    let y: Vec<F> = a.data().iter().zip(b.data()).map(|(&x, &z)| x / z).collect();
    let (ac, bc) = (a.clone(), b.clone());
    let tracked = a.requires_grad() || b.requires_grad();
    tape.record(y, a.shape(), tracked, move |dy, ctx| {
        if let Some(id) = ac.node() {
            ctx.with_grad(id, ac.len(), |g| {
                for ((gi, &d), &z) in g.iter_mut().zip(dy).zip(bc.data()) {
                    *gi += d / z;
                }
            });
        }
        if let Some(id) = bc.node() {
            ctx.with_grad(id, bc.len(), |g| {
                for (((gi, &d), &x), &z) in g.iter_mut().zip(dy).zip(ac.data()).zip(bc.data()) {
                    *gi -= d * x / (z * z);
                }
            });
        }
    })
}

/// `scale * x + shift` with compile-time constants (no gradient for them).
pub fn affine<F: Scalar>(tape: &mut Tape<F>, x: &Tensor<F>, scale: f64, shift: f64) -> Tensor<F> {
    let (s, t) = (F::from_f64(scale), F::from_f64(shift));
    let y: Vec<F> = x.data().iter().map(|&v| s * v + t).collect();
    let xc = x.clone();
    tape.record(y, x.shape(), x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            ctx.with_grad(id, xc.len(), |g| {
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi += s * d;
                }
            });
        }
    })
}

/// LeakyReLU; the subgradient at exactly 0 takes the positive branch.
pub fn leaky_relu<F: Scalar>(tape: &mut Tape<F>, x: &Tensor<F>, slope: f64) -> Tensor<F> {
    let s = F::from_f64(slope);
    let y: Vec<F> = x.data().iter().map(|&v| if v >= F::zero() { v } else { s * v }).collect();
    let xc = x.clone();
    tape.record(y, x.shape(), x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            ctx.with_grad(id, xc.len(), |g| {
                for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(xc.data()) {
                    *gi += if v >= F::zero() { d } else { s * d };
                }
            });
        }
    })
}

// ── Reductions ───────────────────────────────────────────────────────────────

pub fn sum_all<F: Scalar>(tape: &mut Tape<F>, x: &Tensor<F>) -> Tensor<F> {
    let total: F = x.data().iter().copied().sum();
    let xc = x.clone();
    tape.record(vec![total], Shape::scalar(), x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            let d = dy[0];
            ctx.with_grad(id, xc.len(), |g| {
                for gi in g.iter_mut() {
                    *gi += d;
                }
            });
        }
    })
}

pub fn mean_all<F: Scalar>(tape: &mut Tape<F>, x: &Tensor<F>) -> Tensor<F> {
    let n = F::from_f64(x.len() as f64);
    let total: F = x.data().iter().copied().sum();
    let xc = x.clone();
    tape.record(vec![total / n], Shape::scalar(), x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            let d = dy[0] / n;
            ctx.with_grad(id, xc.len(), |g| {
                for gi in g.iter_mut() {
                    *gi += d;
                }
            });
        }
    })
}

/// Mean squared error between same-shape tensors, as a scalar.
pub fn mse<F: Scalar>(tape: &mut Tape<F>, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_same_shape("mse", a, b);
    let n = F::from_f64(a.len() as f64);
    let total: F = a.data().iter().zip(b.data()).map(|(&x, &z)| (x - z) * (x - z)).sum();
    let (ac, bc) = (a.clone(), b.clone());
    let tracked = a.requires_grad() || b.requires_grad();
    tape.record(vec![total / n], Shape::scalar(), tracked, move |dy, ctx| {
        let scale = F::from_f64(2.0) * dy[0] / n;
        if let Some(id) = ac.node() {
            ctx.with_grad(id, ac.len(), |g| {
                for ((gi, &x), &z) in g.iter_mut().zip(ac.data()).zip(bc.data()) {
                    *gi += scale * (x - z);
                }
            });
        }
        if let Some(id) = bc.node() {
            ctx.with_grad(id, bc.len(), |g| {
                for ((gi, &x), &z) in g.iter_mut().zip(ac.data()).zip(bc.data()) {
                    *gi -= scale * (x - z);
                }
            });
        }
    })
}

/// Elementwise natural logarithm.
pub fn ln<F: Scalar>(tape: &mut Tape<F>, x: &Tensor<F>) -> Tensor<F> {
    let y: Vec<F> = x.data().iter().map(|&v| v.ln()).collect();
    let xc = x.clone();
    tape.record(y, x.shape(), x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            ctx.with_grad(id, xc.len(), |g| {
                for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(xc.data()) {
                    *gi += d / v;
                }
            });
        }
    })
}

// ── Architecture-weight ops ──────────────────────────────────────────────────

/// Softmax over every element of a `(1, c, 1, 1)` vector.
pub fn softmax_vec<F: Scalar>(tape: &mut Tape<F>, x: &Tensor<F>) -> Tensor<F> {
    let max = x.data().iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = x.data().iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    let y: Vec<F> = exps.iter().map(|&e| e / total).collect();
    let xc = x.clone();
    let yc = y.clone();
    tape.record(y, x.shape(), x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            let dot: F = dy.iter().zip(&yc).map(|(&d, &v)| d * v).sum();
            ctx.with_grad(id, xc.len(), |g| {
                for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(&yc) {
                    *gi += v * (d - dot);
                }
            });
        }
    })
}

/// `y = sum_k w[k] * xs[k]` for same-shape tensors and a `(1, k, 1, 1)`
/// weight vector; differentiable in both the summands and the weights.
pub fn weighted_sum<F: Scalar>(tape: &mut Tape<F>, xs: &[&Tensor<F>], w: &Tensor<F>) -> Tensor<F> {
    assert!(!xs.is_empty(), "weighted_sum of nothing");
    assert_eq!(w.len(), xs.len(), "weighted_sum: {} weights for {} terms", w.len(), xs.len());
    let shape = xs[0].shape();
    for x in xs {
        assert_eq!(x.shape(), shape, "weighted_sum: mixed shapes");
    }
    let mut y = vec![F::zero(); shape.numel()];
    for (x, &wk) in xs.iter().zip(w.data()) {
        for (yi, &xi) in y.iter_mut().zip(x.data()) {
            *yi += wk * xi;
        }
    }
    let xsc: Vec<Tensor<F>> = xs.iter().map(|x| (*x).clone()).collect();
    let wc = w.clone();
    let tracked = w.requires_grad() || xs.iter().any(|x| x.requires_grad());
    tape.record(y, shape, tracked, move |dy, ctx| {
        for (k, x) in xsc.iter().enumerate() {
            if let Some(id) = x.node() {
                let wk = wc.data()[k];
                ctx.with_grad(id, x.len(), |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi += wk * d;
                    }
                });
            }
        }
        if let Some(id) = wc.node() {
            ctx.with_grad(id, wc.len(), |g| {
                for (gk, x) in g.iter_mut().zip(&xsc) {
                    let dot: F = dy.iter().zip(x.data()).map(|(&d, &v)| d * v).sum();
                    *gk += dot;
                }
            });
        }
    })
}

// ── Structure ops ────────────────────────────────────────────────────────────

/// Concatenates along the channel axis.
pub fn concat_channels<F: Scalar>(
    tape: &mut Tape<F>,
    xs: &[&Tensor<F>],
) -> Result<Tensor<F>, TensorError> {
    assert!(!xs.is_empty(), "concat of nothing");
    let first = xs[0].shape();
    let mut c_total = 0;
    for x in xs {
        let s = x.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{} vs {}", first, s),
            });
        }
        c_total += s.c;
    }
    let shape = Shape::new(first.n, c_total, first.h, first.w);
    let mut y = vec![F::zero(); shape.numel()];
    let hw = first.hw();
    for item in 0..first.n {
        let mut off = item * c_total * hw;
        for x in xs {
            let chw = x.shape().chw();
            y[off..off + chw].copy_from_slice(&x.data()[item * chw..][..chw]);
            off += chw;
        }
    }
    let xsc: Vec<Tensor<F>> = xs.iter().map(|x| (*x).clone()).collect();
    let tracked = xs.iter().any(|x| x.requires_grad());
    Ok(tape.record(y, shape, tracked, move |dy, ctx| {
        let mut c_off = 0;
        for x in &xsc {
            let chw = x.shape().chw();
            if let Some(id) = x.node() {
                ctx.with_grad(id, x.len(), |g| {
                    for item in 0..first.n {
                        let src = &dy[item * c_total * hw + c_off..][..chw];
                        for (gi, &d) in g[item * chw..][..chw].iter_mut().zip(src) {
                            *gi += d;
                        }
                    }
                });
            }
            c_off += chw;
        }
    }))
}

/// Extracts channels `lo..hi`.
pub fn slice_channels<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    lo: usize,
    hi: usize,
) -> Tensor<F> {
    let s = x.shape();
    assert!(lo < hi && hi <= s.c, "slice_channels: {lo}..{hi} out of {} channels", s.c);
    let shape = Shape::new(s.n, hi - lo, s.h, s.w);
    let hw = s.hw();
    let mut y = vec![F::zero(); shape.numel()];
    for item in 0..s.n {
        let src = &x.data()[(item * s.c + lo) * hw..][..(hi - lo) * hw];
        y[item * (hi - lo) * hw..][..(hi - lo) * hw].copy_from_slice(src);
    }
    let xc = x.clone();
    tape.record(y, shape, x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            ctx.with_grad(id, xc.len(), |g| {
                for item in 0..s.n {
                    let dst = &mut g[(item * s.c + lo) * hw..][..(hi - lo) * hw];
                    let src = &dy[item * (hi - lo) * hw..][..(hi - lo) * hw];
                    for (gi, &d) in dst.iter_mut().zip(src) {
                        *gi += d;
                    }
                }
            });
        }
    })
}

fn shuffle_kernel<F: Scalar>(x: &[F], n: usize, c_out: usize, h: usize, w: usize, s: usize) -> Vec<F> {
    // (n, c_out*s^2, h, w) -> (n, c_out, h*s, w*s)
    let mut y = vec![F::zero(); n * c_out * h * s * w * s];
    let (hs, ws) = (h * s, w * s);
    for item in 0..n {
        for co in 0..c_out {
            for dh in 0..s {
                for dw in 0..s {
                    let ci = co * s * s + dh * s + dw;
                    let src_plane = &x[(item * c_out * s * s + ci) * h * w..][..h * w];
                    let dst_plane = &mut y[(item * c_out + co) * hs * ws..][..hs * ws];
                    for row in 0..h {
                        let src_row = &src_plane[row * w..][..w];
                        let dst_row = &mut dst_plane[(row * s + dh) * ws..][..ws];
                        for (col, &v) in src_row.iter().enumerate() {
                            dst_row[col * s + dw] = v;
                        }
                    }
                }
            }
        }
    }
    y
}

fn unshuffle_kernel<F: Scalar>(x: &[F], n: usize, c_in: usize, h: usize, w: usize, s: usize) -> Vec<F> {
    // (n, c_in, h, w) -> (n, c_in*s^2, h/s, w/s); exact inverse of shuffle_kernel.
    let (ho, wo) = (h / s, w / s);
    let mut y = vec![F::zero(); n * c_in * h * w];
    for item in 0..n {
        for ci in 0..c_in {
            for dh in 0..s {
                for dw in 0..s {
                    let co = ci * s * s + dh * s + dw;
                    let src_plane = &x[(item * c_in + ci) * h * w..][..h * w];
                    let dst_plane = &mut y[(item * c_in * s * s + co) * ho * wo..][..ho * wo];
                    for row in 0..ho {
                        let src_row = &src_plane[(row * s + dh) * w..][..w];
                        let dst_row = &mut dst_plane[row * wo..][..wo];
                        for (col, dst) in dst_row.iter_mut().enumerate() {
                            *dst = src_row[col * s + dw];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Rearranges `(n, c*s^2, h, w)` into `(n, c, h*s, w*s)`.
pub fn pixel_shuffle<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    s: usize,
) -> Result<Tensor<F>, TensorError> {
    let sh = x.shape();
    if s == 0 || sh.c % (s * s) != 0 {
        return Err(TensorError::BadShuffle { channels: sh.c, scale: s });
    }
    let c_out = sh.c / (s * s);
    let y = shuffle_kernel(x.data(), sh.n, c_out, sh.h, sh.w, s);
    let shape = Shape::new(sh.n, c_out, sh.h * s, sh.w * s);
    let xc = x.clone();
    Ok(tape.record(y, shape, x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            let dx = unshuffle_kernel(dy, sh.n, c_out, sh.h * s, sh.w * s, s);
            ctx.with_grad(id, xc.len(), |g| {
                for (gi, &d) in g.iter_mut().zip(&dx) {
                    *gi += d;
                }
            });
        }
    }))
}

/// Inverse of [`pixel_shuffle`]: `(n, c, h, w)` into `(n, c*s^2, h/s, w/s)`.
pub fn pixel_unshuffle<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    s: usize,
) -> Result<Tensor<F>, TensorError> {
    let sh = x.shape();
    if s == 0 || sh.h % s != 0 || sh.w % s != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "pixel_unshuffle",
            detail: format!("{} not tileable by {s}", sh),
        });
    }
    let y = unshuffle_kernel(x.data(), sh.n, sh.c, sh.h, sh.w, s);
    let shape = Shape::new(sh.n, sh.c * s * s, sh.h / s, sh.w / s);
    let xc = x.clone();
    Ok(tape.record(y, shape, x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            let dx = shuffle_kernel(dy, sh.n, sh.c, sh.h / s, sh.w / s, s);
            ctx.with_grad(id, xc.len(), |g| {
                for (gi, &d) in g.iter_mut().zip(&dx) {
                    *gi += d;
                }
            });
        }
    }))
}

/// An untracked all-zeros tensor.
pub fn zeros<F: Scalar>(tape: &mut Tape<F>, shape: Shape) -> Tensor<F> {
    tape.constant(vec![F::zero(); shape.numel()], shape)
}

// ── Convolution ──────────────────────────────────────────────────────────────

/// Stride-1 convolution geometry: kernel size, zero padding, dilation, groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Output-preserving padding for an odd kernel: `dilation * (kernel-1) / 2`.
    pub fn same(kernel: usize, dilation: usize) -> Result<Self, TensorError> {
        Ok(ConvSpec { kernel, padding: same_padding(kernel, dilation)?, dilation, groups: 1 })
    }

    pub fn pointwise() -> Self {
        ConvSpec { kernel: 1, padding: 0, dilation: 1, groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Padding that preserves spatial extent at stride 1; even kernels have none.
pub fn same_padding(kernel: usize, dilation: usize) -> Result<usize, TensorError> {
    if kernel % 2 == 0 {
        return Err(TensorError::EvenKernel(kernel));
    }
    Ok(dilation * (kernel - 1) / 2)
}

fn depthwise_fwd<F: Scalar>(x: &[F], w: &[F], g: &ConvGeom, y: &mut [F]) {
    let k = g.kernel;
    for c in 0..g.channels {
        let xc = &x[c * g.h_in * g.w_in..][..g.h_in * g.w_in];
        let yc = &mut y[c * g.h_out * g.w_out..][..g.h_out * g.w_out];
        for kh in 0..k {
            let dh = (kh * g.dilation) as isize - g.padding as isize;
            for kw in 0..k {
                let dw = (kw * g.dilation) as isize - g.padding as isize;
                let wv = w[(c * k + kh) * k + kw];
                for oh in 0..g.h_out {
                    let ih = oh as isize + dh;
                    if ih < 0 || ih >= g.h_in as isize {
                        continue;
                    }
                    let xr = &xc[ih as usize * g.w_in..][..g.w_in];
                    let yr = &mut yc[oh * g.w_out..][..g.w_out];
                    let lo = (-dw).max(0) as usize;
                    let hi = (g.w_in as isize - dw).clamp(0, g.w_out as isize) as usize;
                    for ow in lo..hi {
                        yr[ow] += wv * xr[(ow as isize + dw) as usize];
                    }
                }
            }
        }
    }
}

fn depthwise_bwd_data<F: Scalar>(dy: &[F], w: &[F], g: &ConvGeom, dx: &mut [F]) {
    let k = g.kernel;
    for c in 0..g.channels {
        let dyc = &dy[c * g.h_out * g.w_out..][..g.h_out * g.w_out];
        let dxc = &mut dx[c * g.h_in * g.w_in..][..g.h_in * g.w_in];
        for kh in 0..k {
            let dh = (kh * g.dilation) as isize - g.padding as isize;
            for kw in 0..k {
                let dw = (kw * g.dilation) as isize - g.padding as isize;
                let wv = w[(c * k + kh) * k + kw];
                for oh in 0..g.h_out {
                    let ih = oh as isize + dh;
                    if ih < 0 || ih >= g.h_in as isize {
                        continue;
                    }
                    let dyr = &dyc[oh * g.w_out..][..g.w_out];
                    let dxr = &mut dxc[ih as usize * g.w_in..][..g.w_in];
                    let lo = (-dw).max(0) as usize;
                    let hi = (g.w_in as isize - dw).clamp(0, g.w_out as isize) as usize;
                    for ow in lo..hi {
                        dxr[(ow as isize + dw) as usize] += wv * dyr[ow];
                    }
                }
            }
        }
    }
}

fn depthwise_bwd_weight<F: Scalar>(x: &[F], dy: &[F], g: &ConvGeom, gw: &mut [F]) {
    let k = g.kernel;
    for c in 0..g.channels {
        let xc = &x[c * g.h_in * g.w_in..][..g.h_in * g.w_in];
        let dyc = &dy[c * g.h_out * g.w_out..][..g.h_out * g.w_out];
        for kh in 0..k {
            let dh = (kh * g.dilation) as isize - g.padding as isize;
            for kw in 0..k {
                let dw = (kw * g.dilation) as isize - g.padding as isize;
                let mut acc = F::zero();
                for oh in 0..g.h_out {
                    let ih = oh as isize + dh;
                    if ih < 0 || ih >= g.h_in as isize {
                        continue;
                    }
                    let xr = &xc[ih as usize * g.w_in..][..g.w_in];
                    let dyr = &dyc[oh * g.w_out..][..g.w_out];
                    let lo = (-dw).max(0) as usize;
                    let hi = (g.w_in as isize - dw).clamp(0, g.w_out as isize) as usize;
                    for ow in lo..hi {
                        acc += dyr[ow] * xr[(ow as isize + dw) as usize];
                    }
                }
                gw[(c * k + kh) * k + kw] += acc;
            }
        }
    }
}

/// Stride-1 2-d convolution (cross-correlation). `x` is `(n, c_in, h, w)`,
/// `weight` is `(c_out, c_in/groups, k, k)`, `bias` is `(1, c_out, 1, 1)`.
pub fn conv2d<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    spec: ConvSpec,
) -> Result<Tensor<F>, TensorError> {
    let xs = x.shape();
    let ws = weight.shape();
    let (c_out, groups) = (ws.n, spec.groups);
    if ws.h != spec.kernel || ws.w != spec.kernel {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("weight {} does not match kernel size {}", ws, spec.kernel),
        });
    }
    if groups == 0 || xs.c % groups != 0 || c_out % groups != 0 {
        return Err(TensorError::BadGroups { channels: xs.c, groups });
    }
    if ws.c * groups != xs.c {
        return Err(TensorError::ChannelMismatch { expected: ws.c * groups, got: xs.c });
    }
    if let Some(b) = bias {
        assert_eq!(b.shape(), Shape::vec(c_out), "conv2d: bias shape {}", b.shape());
    }
    let geom = ConvGeom::new(xs.c, xs.h, xs.w, spec.kernel, spec.padding, spec.dilation);
    if geom.h_out == 0 || geom.w_out == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel span exceeds padded input {}", xs),
        });
    }
    let depthwise = groups == xs.c && c_out == xs.c;
    let (cin_g, cout_g) = (xs.c / groups, c_out / groups);
    let kdim = cin_g * spec.kernel * spec.kernel;
    let ohw = geom.h_out * geom.w_out;
    let out_shape = Shape::new(xs.n, c_out, geom.h_out, geom.w_out);

    let mut y = vec![F::zero(); out_shape.numel()];
    let chw = xs.chw();
    let out_chw = out_shape.chw();
    if depthwise {
        for i in 0..xs.n {
            depthwise_fwd(&x.data()[i * chw..][..chw], weight.data(), &geom, &mut y[i * out_chw..][..out_chw]);
        }
    } else {
        let mut col = tape.take_scratch(geom.col_len());
        for i in 0..xs.n {
            im2col(&x.data()[i * chw..][..chw], &geom, &mut col);
            for g in 0..groups {
                matmul(
                    cout_g,
                    kdim,
                    ohw,
                    F::one(),
                    &weight.data()[g * cout_g * kdim..],
                    &col[g * kdim * ohw..],
                    F::zero(),
                    &mut y[i * out_chw + g * cout_g * ohw..],
                );
            }
        }
        tape.put_scratch(col);
    }
    if let Some(b) = bias {
        for i in 0..xs.n {
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut y[i * out_chw + c * ohw..][..ohw] {
                    *v += bv;
                }
            }
        }
    }

    let (xc, wc) = (x.clone(), weight.clone());
    let bc = bias.cloned();
    let tracked = x.requires_grad()
        || weight.requires_grad()
        || bc.as_ref().is_some_and(|b| b.requires_grad());
    Ok(tape.record(y, out_shape, tracked, move |dy, ctx| {
        let n = xc.shape().n;
        if let Some(wid) = wc.node() {
            if depthwise {
                ctx.with_grad(wid, wc.len(), |gw| {
                    for i in 0..n {
                        depthwise_bwd_weight(
                            &xc.data()[i * chw..][..chw],
                            &dy[i * out_chw..][..out_chw],
                            &geom,
                            gw,
                        );
                    }
                });
            } else {
                let mut col = ctx.take_scratch(geom.col_len());
                ctx.with_grad(wid, wc.len(), |gw| {
                    for i in 0..n {
                        im2col(&xc.data()[i * chw..][..chw], &geom, &mut col);
                        for g in 0..groups {
                            matmul_nt(
                                cout_g,
                                ohw,
                                kdim,
                                F::one(),
                                &dy[i * out_chw + g * cout_g * ohw..],
                                &col[g * kdim * ohw..],
                                F::one(),
                                &mut gw[g * cout_g * kdim..],
                            );
                        }
                    }
                });
                ctx.put_scratch(col);
            }
        }
        if let Some(xid) = xc.node() {
            if depthwise {
                ctx.with_grad(xid, xc.len(), |gx| {
                    for i in 0..n {
                        depthwise_bwd_data(
                            &dy[i * out_chw..][..out_chw],
                            wc.data(),
                            &geom,
                            &mut gx[i * chw..][..chw],
                        );
                    }
                });
            } else {
                let mut dcol = ctx.take_scratch(geom.col_len());
                ctx.with_grad(xid, xc.len(), |gx| {
                    for i in 0..n {
                        for g in 0..groups {
                            matmul_tn(
                                kdim,
                                cout_g,
                                ohw,
                                F::one(),
                                &wc.data()[g * cout_g * kdim..],
                                &dy[i * out_chw + g * cout_g * ohw..],
                                F::zero(),
                                &mut dcol[g * kdim * ohw..],
                            );
                        }
                        col2im_add(&dcol, &geom, &mut gx[i * chw..][..chw]);
                    }
                });
                ctx.put_scratch(dcol);
            }
        }
        if let Some(b) = &bc {
            if let Some(bid) = b.node() {
                ctx.with_grad(bid, b.len(), |gb| {
                    for i in 0..n {
                        for (c, gbc) in gb.iter_mut().enumerate() {
                            let row = &dy[i * out_chw + c * ohw..][..ohw];
                            let mut acc = F::zero();
                            for &d in row {
                                acc += d;
                            }
                            *gbc += acc;
                        }
                    }
                });
            }
        }
    }))
}

/// Depthwise `k x k` (optionally dilated, 'same'-padded) followed by a
/// pointwise `1 x 1` projection. `depth_weight` is `(c, 1, k, k)`,
/// `point_weight` is `(c_out, c, 1, 1)`.
pub fn separable_conv<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    depth_weight: &Tensor<F>,
    point_weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    kernel: usize,
    dilation: usize,
) -> Result<Tensor<F>, TensorError> {
    let c = x.shape().c;
    let spatial = ConvSpec {
        kernel,
        padding: same_padding(kernel, dilation)?,
        dilation,
        groups: c,
    };
    let mid = conv2d(tape, x, depth_weight, None, spatial)?;
    conv2d(tape, &mid, point_weight, bias, ConvSpec::pointwise())
}

// ── Batch normalization ──────────────────────────────────────────────────────

/// Exponential running statistics carried by a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnStats<F: Scalar> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> BnStats<F> {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![F::zero(); channels], var: vec![F::one(); channels] }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnCfg {
    pub eps: f64,
    /// Fraction of the fresh batch statistic blended into the running value.
    pub momentum: f64,
}

impl Default for BnCfg {
    fn default() -> Self {
        BnCfg { eps: 1e-5, momentum: 0.1 }
    }
}

/// Batch normalization over `(n, h, w)` per channel. In training mode the
/// batch statistics normalize and update `stats`; in eval mode `stats`
/// normalize and stay untouched. Biased variance is used throughout.
pub fn batch_norm<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    gamma: Option<&Tensor<F>>,
    beta: Option<&Tensor<F>>,
    stats: &mut BnStats<F>,
    cfg: BnCfg,
    training: bool,
) -> Tensor<F> {
    let s = x.shape();
    assert_eq!(stats.mean.len(), s.c, "batch_norm: stats track {} channels", stats.mean.len());
    assert_eq!(gamma.is_some(), beta.is_some(), "batch_norm: gamma and beta come together");
    if let Some(g) = gamma {
        assert_eq!(g.shape(), Shape::vec(s.c), "batch_norm: gamma shape {}", g.shape());
    }
    let hw = s.hw();
    let m = (s.n * hw) as f64;
    let eps = F::from_f64(cfg.eps);

    // Per-channel moments: batch moments when training, running otherwise.
    let (mean, var) = if training {
        let mut mean = vec![F::zero(); s.c];
        let mut var = vec![F::zero(); s.c];
        for c in 0..s.c {
            let mut acc = F::zero();
            for i in 0..s.n {
                for &v in &x.data()[(i * s.c + c) * hw..][..hw] {
                    acc += v;
                }
            }
            mean[c] = acc / F::from_f64(m);
        }
        for c in 0..s.c {
            let mu = mean[c];
            let mut acc = F::zero();
            for i in 0..s.n {
                for &v in &x.data()[(i * s.c + c) * hw..][..hw] {
                    let d = v - mu;
                    acc += d * d;
                }
            }
            var[c] = acc / F::from_f64(m);
        }
        let blend = F::from_f64(cfg.momentum);
        let keep = F::one() - blend;
        for c in 0..s.c {
            stats.mean[c] = keep * stats.mean[c] + blend * mean[c];
            stats.var[c] = keep * stats.var[c] + blend * var[c];
        }
        (mean, var)
    } else {
        (stats.mean.clone(), stats.var.clone())
    };
    let invstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();

    let mut y = vec![F::zero(); s.numel()];
    for c in 0..s.c {
        let (mu, is) = (mean[c], invstd[c]);
        let (g, b) = match (gamma, beta) {
            (Some(g), Some(b)) => (g.data()[c], b.data()[c]),
            _ => (F::one(), F::zero()),
        };
        for i in 0..s.n {
            let src = &x.data()[(i * s.c + c) * hw..][..hw];
            let dst = &mut y[(i * s.c + c) * hw..][..hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = g * (v - mu) * is + b;
            }
        }
    }

    let xc = x.clone();
    let gc = gamma.cloned();
    let bc = beta.cloned();
    let tracked = x.requires_grad()
        || gc.as_ref().is_some_and(|g| g.requires_grad())
        || bc.as_ref().is_some_and(|b| b.requires_grad());
    tape.record(y, s, tracked, move |dy, ctx| {
        // Recompute xhat per channel from the saved input and moments.
        let xhat_of = |c: usize, i: usize| -> Vec<F> {
            let (mu, is) = (mean[c], invstd[c]);
            xc.data()[(i * s.c + c) * hw..][..hw].iter().map(|&v| (v - mu) * is).collect()
        };
        if let Some(g) = &gc {
            if let Some(gid) = g.node() {
                ctx.with_grad(gid, s.c, |gg| {
                    for c in 0..s.c {
                        let mut acc = F::zero();
                        for i in 0..s.n {
                            let xh = xhat_of(c, i);
                            for (&d, &h) in dy[(i * s.c + c) * hw..][..hw].iter().zip(&xh) {
                                acc += d * h;
                            }
                        }
                        gg[c] += acc;
                    }
                });
            }
        }
        if let Some(b) = &bc {
            if let Some(bid) = b.node() {
                ctx.with_grad(bid, s.c, |gb| {
                    for c in 0..s.c {
                        let mut acc = F::zero();
                        for i in 0..s.n {
                            for &d in &dy[(i * s.c + c) * hw..][..hw] {
                                acc += d;
                            }
                        }
                        gb[c] += acc;
                    }
                });
            }
        }
        if let Some(xid) = xc.node() {
            ctx.with_grad(xid, xc.len(), |gx| {
                for c in 0..s.c {
                    let gamma_c = gc.as_ref().map_or(F::one(), |g| g.data()[c]);
                    let is = invstd[c];
                    if training {
                        // dx = invstd/m * (m*g - sum(g) - xhat * sum(g*xhat)),
                        // with g = dy * gamma.
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for i in 0..s.n {
                            let xh = xhat_of(c, i);
                            for (&d, &h) in dy[(i * s.c + c) * hw..][..hw].iter().zip(&xh) {
                                let gv = d * gamma_c;
                                sum_g += gv;
                                sum_gx += gv * h;
                            }
                        }
                        let inv_m = F::from_f64(1.0 / m);
                        for i in 0..s.n {
                            let xh = xhat_of(c, i);
                            let dst = &mut gx[(i * s.c + c) * hw..][..hw];
                            let src = &dy[(i * s.c + c) * hw..][..hw];
                            for ((gi, &d), &h) in dst.iter_mut().zip(src).zip(&xh) {
                                let gv = d * gamma_c;
                                *gi += is * (gv - inv_m * (sum_g + h * sum_gx));
                            }
                        }
                    } else {
                        // Moments are constants in eval mode.
                        let scale = gamma_c * is;
                        for i in 0..s.n {
                            let dst = &mut gx[(i * s.c + c) * hw..][..hw];
                            let src = &dy[(i * s.c + c) * hw..][..hw];
                            for (gi, &d) in dst.iter_mut().zip(src) {
                                *gi += scale * d;
                            }
                        }
                    }
                }
            });
        }
    })
}

// ── Bicubic resampling ───────────────────────────────────────────────────────

/// Catmull-Rom cubic (a = -0.5).
fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        A * (((t - 5.0) * t + 8.0) * t - 4.0)
    } else {
        0.0
    }
}

/// Four source taps and weights per output position along one axis, using
/// half-pixel-center mapping and edge clamping.
fn resize_taps<F: Scalar>(n_in: usize, n_out: usize) -> Vec<([usize; 4], [F; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor() as isize - 1;
            let mut idx = [0usize; 4];
            let mut wt = [F::zero(); 4];
            for j in 0..4 {
                let pos = base + j as isize;
                idx[j] = pos.clamp(0, n_in as isize - 1) as usize;
                wt[j] = F::from_f64(cubic_kernel(src - pos as f64));
            }
            (idx, wt)
        })
        .collect()
}

/// Catmull-Rom bicubic resize to `(h_out, w_out)`, half-pixel centers,
/// clamped borders. Linear in the input, so the adjoint is exact.
pub fn bicubic_resize<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    h_out: usize,
    w_out: usize,
) -> Tensor<F> {
    let s = x.shape();
    assert!(h_out > 0 && w_out > 0, "bicubic_resize to empty output");
    let taps_w = resize_taps::<F>(s.w, w_out);
    let taps_h = resize_taps::<F>(s.h, h_out);
    let planes = s.n * s.c;

    // Horizontal pass, then vertical.
    let mut tmp = vec![F::zero(); planes * s.h * w_out];
    for row in 0..planes * s.h {
        let src = &x.data()[row * s.w..][..s.w];
        let dst = &mut tmp[row * w_out..][..w_out];
        for (o, (idx, wt)) in taps_w.iter().enumerate() {
            dst[o] = wt[0] * src[idx[0]]
                + wt[1] * src[idx[1]]
                + wt[2] * src[idx[2]]
                + wt[3] * src[idx[3]];
        }
    }
    let mut y = vec![F::zero(); planes * h_out * w_out];
    for plane in 0..planes {
        let src = &tmp[plane * s.h * w_out..][..s.h * w_out];
        let dst = &mut y[plane * h_out * w_out..][..h_out * w_out];
        for (o, (idx, wt)) in taps_h.iter().enumerate() {
            let dst_row = &mut dst[o * w_out..][..w_out];
            for j in 0..4 {
                let src_row = &src[idx[j] * w_out..][..w_out];
                let w = wt[j];
                for (d, &v) in dst_row.iter_mut().zip(src_row) {
                    *d += w * v;
                }
            }
        }
    }

    let shape = Shape::new(s.n, s.c, h_out, w_out);
    let xc = x.clone();
    tape.record(y, shape, x.requires_grad(), move |dy, ctx| {
        if let Some(id) = xc.node() {
            // Adjoint: scatter through the vertical taps, then horizontal.
            let mut dtmp = vec![F::zero(); planes * s.h * w_out];
            for plane in 0..planes {
                let src = &dy[plane * h_out * w_out..][..h_out * w_out];
                let dst = &mut dtmp[plane * s.h * w_out..][..s.h * w_out];
                for (o, (idx, wt)) in taps_h.iter().enumerate() {
                    let src_row = &src[o * w_out..][..w_out];
                    for j in 0..4 {
                        let w = wt[j];
                        let dst_row = &mut dst[idx[j] * w_out..][..w_out];
                        for (d, &v) in dst_row.iter_mut().zip(src_row) {
                            *d += w * v;
                        }
                    }
                }
            }
            ctx.with_grad(id, xc.len(), |gx| {
                for row in 0..planes * s.h {
                    let src = &dtmp[row * w_out..][..w_out];
                    let dst = &mut gx[row * s.w..][..s.w];
                    for (o, (idx, wt)) in taps_w.iter().enumerate() {
                        let v = src[o];
                        for j in 0..4 {
                            dst[idx[j]] += wt[j] * v;
                        }
                    }
                }
            });
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::Param;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Loss that weights every output element differently, so a misrouted
    /// gradient (wrong index, wrong transpose) cannot cancel out.
    fn pinned_loss(
        tape: &mut Tape<f64>,
        y: &Tensor<f64>,
        seed: u64,
    ) -> Tensor<f64> {
        let pins = tape.constant(rand_vec(y.len(), seed), y.shape());
        let prod = mul(tape, y, &pins);
        sum_all(tape, &prod)
    }

    // ── elementwise ──

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, -2.0, 3.0], Shape::vec(3));
        let b = tape.constant(vec![0.5, 4.0, -1.5], Shape::vec(3));
        assert_eq!(add(&mut tape, &a, &b).data(), &[1.5, 2.0, 1.5]);
        assert_eq!(sub(&mut tape, &a, &b).data(), &[0.5, -6.0, 4.5]);
        assert_eq!(mul(&mut tape, &a, &b).data(), &[0.5, -8.0, -4.5]);
        assert_eq!(div(&mut tape, &a, &b).data(), &[2.0, -0.5, -2.0]);
        assert_eq!(affine(&mut tape, &a, 2.0, 1.0).data(), &[3.0, -3.0, 7.0]);
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let shape = Shape::new(2, 3, 2, 2);
        let a = Param::new("a", shape, rand_vec(shape.numel(), 1));
        // Keep b away from zero so div stays well-conditioned.
        let bv: Vec<f64> = rand_vec(shape.numel(), 2)
            .iter()
            .map(|v| v + 2.0 * v.signum() + if *v == 0.0 { 2.0 } else { 0.0 })
            .collect();
        let b = Param::new("b", shape, bv);
        for op in 0..5 {
            let check = grad_check(&[a.clone(), b.clone()], 1e-5, None, 7, |tape| {
                let (x, z) = (a.leaf(tape), b.leaf(tape));
                let y = match op {
                    0 => add(tape, &x, &z),
                    1 => sub(tape, &x, &z),
                    2 => mul(tape, &x, &z),
                    3 => div(tape, &x, &z),
                    _ => affine(tape, &x, -1.7, 0.3),
                };
                pinned_loss(tape, &y, 99)
            });
            check.assert_below(1e-7);
        }
    }

    #[test]
    fn leaky_relu_values_and_zero_branch() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, -1.0, 0.0, 2.5], Shape::vec(4));
        let y = leaky_relu(&mut tape, &x, 0.2);
        assert_eq!(y.data(), &[1.0, -0.2, 0.0, 2.5]);

        // The subgradient at exactly 0 takes the positive branch.
        let p = Param::new("x", Shape::vec(3), vec![3.0, 0.0, -3.0]);
        let mut tape = Tape::new();
        let t = p.leaf(&mut tape);
        let y = leaky_relu(&mut tape, &t, 0.2);
        let loss = sum_all(&mut tape, &y);
        tape.backward(&loss).unwrap();
        assert_eq!(p.grad(), vec![1.0, 1.0, 0.2]);
    }

    #[test]
    fn leaky_relu_grad_matches_finite_differences() {
        // Data bounded away from 0; the kink is not differentiable.
        let v: Vec<f64> = rand_vec(24, 3).iter().map(|x| x + 0.5 * x.signum()).collect();
        let p = Param::new("x", Shape::new(1, 6, 2, 2), v);
        let check = grad_check(&[p.clone()], 1e-5, None, 11, |tape| {
            let t = p.leaf(tape);
            let y = leaky_relu(tape, &t, 0.2);
            pinned_loss(tape, &y, 5)
        });
        check.assert_below(1e-7);
    }

    // ── reductions ──

    #[test]
    fn reduction_values() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], Shape::new(1, 1, 2, 2));
        let b = tape.constant(vec![1.0, 2.0, 2.0, 8.0], Shape::new(1, 1, 2, 2));
        assert_eq!(sum_all(&mut tape, &a).item(), 10.0);
        assert_eq!(mean_all(&mut tape, &a).item(), 2.5);
        // mse = ((0)^2 + (0)^2 + (1)^2 + (-4)^2) / 4
        assert_eq!(mse(&mut tape, &a, &b).item(), 17.0 / 4.0);
        assert_eq!(mse(&mut tape, &a, &a).item(), 0.0);
        let c = tape.constant(vec![1.0, std::f64::consts::E], Shape::vec(2));
        let l = ln(&mut tape, &c);
        assert!(l.data()[0].abs() < 1e-15 && (l.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reduction_grads_match_finite_differences() {
        let shape = Shape::new(2, 2, 3, 3);
        let a = Param::new("a", shape, rand_vec(shape.numel(), 4));
        let b = Param::new("b", shape, rand_vec(shape.numel(), 5));
        let check = grad_check(&[a.clone(), b.clone()], 1e-5, None, 13, |tape| {
            let (x, z) = (a.leaf(tape), b.leaf(tape));
            mse(tape, &x, &z)
        });
        check.assert_below(1e-7);

        let check = grad_check(&[a.clone()], 1e-5, None, 17, |tape| {
            let x = a.leaf(tape);
            mean_all(tape, &x)
        });
        check.assert_below(1e-8);

        // ln needs positive inputs.
        let pv: Vec<f64> = rand_vec(12, 6).iter().map(|v| v.abs() + 0.5).collect();
        let p = Param::new("p", Shape::new(1, 3, 2, 2), pv);
        let check = grad_check(&[p.clone()], 1e-5, None, 19, |tape| {
            let x = p.leaf(tape);
            let y = ln(tape, &x);
            pinned_loss(tape, &y, 8)
        });
        check.assert_below(1e-7);
    }

    // ── softmax / weighted sum ──

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(vec![0.0; 7], Shape::vec(7));
        let y = softmax_vec(&mut tape, &x);
        for &v in y.data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_normalizes_and_orders() {
        let mut tape = Tape::inference();
        let x = tape.constant(vec![0.3, -0.8, 0.5], Shape::vec(3));
        let y = softmax_vec(&mut tape, &x);
        let total: f64 = y.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(y.data()[2] > y.data()[0] && y.data()[0] > y.data()[1]);
        // Invariant under a constant shift of the logits.
        let xs = tape.constant(vec![100.3, 99.2, 100.5], Shape::vec(3));
        let ys = softmax_vec(&mut tape, &xs);
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let p = Param::new("logits", Shape::vec(7), rand_vec(7, 9));
        let check = grad_check(&[p.clone()], 1e-5, None, 23, |tape| {
            let x = p.leaf(tape);
            let y = softmax_vec(tape, &x);
            pinned_loss(tape, &y, 10)
        });
        check.assert_below(1e-7);
    }

    #[test]
    fn weighted_sum_value_and_grads() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], Shape::vec(2));
        let b = tape.constant(vec![10.0, 20.0], Shape::vec(2));
        let w = tape.constant(vec![0.25, 0.5], Shape::vec(2));
        let y = weighted_sum(&mut tape, &[&a, &b], &w);
        assert_eq!(y.data(), &[5.25, 10.5]);

        let shape = Shape::new(2, 2, 2, 2);
        let xs: Vec<Param<f64>> = (0..3)
            .map(|k| Param::new("x", shape, rand_vec(shape.numel(), 20 + k)))
            .collect();
        let w = Param::new("w", Shape::vec(3), vec![0.6, -0.3, 0.9]);
        let mut all = xs.clone();
        all.push(w.clone());
        let check = grad_check(&all, 1e-5, None, 29, |tape| {
            let ts: Vec<Tensor<f64>> = xs.iter().map(|p| p.leaf(tape)).collect();
            let wt = w.leaf(tape);
            let refs: Vec<&Tensor<f64>> = ts.iter().collect();
            let y = weighted_sum(tape, &refs, &wt);
            pinned_loss(tape, &y, 11)
        });
        check.assert_below(1e-7);
    }

    // ── concat / slice ──

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a_data = rand_vec(2 * 3 * 2 * 2, 30);
        let b_data = rand_vec(2 * 1 * 2 * 2, 31);
        let a = tape.constant(a_data.clone(), Shape::new(2, 3, 2, 2));
        let b = tape.constant(b_data.clone(), Shape::new(2, 1, 2, 2));
        let y = concat_channels(&mut tape, &[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, 2, 2));
        let back_a = slice_channels(&mut tape, &y, 0, 3);
        let back_b = slice_channels(&mut tape, &y, 3, 4);
        assert_eq!(back_a.data(), &a_data[..]);
        assert_eq!(back_b.data(), &b_data[..]);
    }

    #[test]
    fn concat_rejects_mismatched_spatial_shapes() {
        let mut tape = Tape::<f64>::inference();
        let a = tape.constant(vec![0.0; 8], Shape::new(1, 2, 2, 2));
        let b = tape.constant(vec![0.0; 6], Shape::new(1, 2, 3, 1));
        assert!(matches!(
            concat_channels(&mut tape, &[&a, &b]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn concat_and_slice_grads_match_finite_differences() {
        let a = Param::new("a", Shape::new(2, 2, 3, 3), rand_vec(36, 32));
        let b = Param::new("b", Shape::new(2, 3, 3, 3), rand_vec(54, 33));
        let check = grad_check(&[a.clone(), b.clone()], 1e-5, None, 31, |tape| {
            let (x, z) = (a.leaf(tape), b.leaf(tape));
            let y = concat_channels(tape, &[&x, &z]).unwrap();
            let mid = slice_channels(tape, &y, 1, 4);
            pinned_loss(tape, &mid, 12)
        });
        check.assert_below(1e-8);
    }

    // ── pixel shuffle ──

    #[test]
    fn pixel_shuffle_interleaves_channel_blocks() {
        // (1, 4, 2, 2) -> (1, 1, 4, 4): out[2h+dh][2w+dw] == in[2dh+dw][h][w].
        let mut tape = Tape::inference();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.constant(data, Shape::new(1, 4, 2, 2));
        let y = pixel_shuffle(&mut tape, &x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        for h in 0..2 {
            for w in 0..2 {
                for dh in 0..2 {
                    for dw in 0..2 {
                        let ci = 2 * dh + dw;
                        let expect = (ci * 4 + h * 2 + w) as f64;
                        assert_eq!(y.data()[(2 * h + dh) * 4 + (2 * w + dw)], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_round_trips_and_validates() {
        let mut tape = Tape::inference();
        let data = rand_vec(1 * 8 * 3 * 5, 40);
        let x = tape.constant(data.clone(), Shape::new(1, 8, 3, 5));
        let y = pixel_shuffle(&mut tape, &x, 2).unwrap();
        let z = pixel_unshuffle(&mut tape, &y, 2).unwrap();
        assert_eq!(z.data(), &data[..]);

        let odd = tape.constant(vec![0.0; 6], Shape::new(1, 6, 1, 1));
        assert!(matches!(
            pixel_shuffle(&mut tape, &odd, 2),
            Err(TensorError::BadShuffle { channels: 6, scale: 2 })
        ));
    }

    #[test]
    fn pixel_shuffle_grads_match_finite_differences() {
        let p = Param::new("x", Shape::new(2, 4, 2, 3), rand_vec(48, 41));
        let check = grad_check(&[p.clone()], 1e-5, None, 37, |tape| {
            let x = p.leaf(tape);
            let y = pixel_shuffle(tape, &x, 2).unwrap();
            pinned_loss(tape, &y, 13)
        });
        check.assert_below(1e-8);

        let q = Param::new("x", Shape::new(1, 2, 4, 6), rand_vec(48, 42));
        let check = grad_check(&[q.clone()], 1e-5, None, 41, |tape| {
            let x = q.leaf(tape);
            let y = pixel_unshuffle(tape, &x, 2).unwrap();
            pinned_loss(tape, &y, 14)
        });
        check.assert_below(1e-8);
    }

    // ── convolution ──

    #[test]
    fn same_padding_matches_and_rejects_even_kernels() {
        assert_eq!(same_padding(1, 1).unwrap(), 0);
        assert_eq!(same_padding(3, 1).unwrap(), 1);
        assert_eq!(same_padding(5, 1).unwrap(), 2);
        assert_eq!(same_padding(3, 2).unwrap(), 2);
        assert_eq!(same_padding(5, 2).unwrap(), 4);
        assert!(matches!(same_padding(4, 1), Err(TensorError::EvenKernel(4))));
    }

    #[test]
    fn conv_impulse_reproduces_point_reflected_kernel() {
        // Cross-correlation of a centered impulse paints the kernel rotated
        // by 180 degrees around the impulse.
        let mut tape = Tape::inference();
        let mut img = vec![0.0f64; 25];
        img[2 * 5 + 2] = 1.0;
        let x = tape.constant(img, Shape::new(1, 1, 5, 5));
        let wdata: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w = tape.constant(wdata.clone(), Shape::new(1, 1, 3, 3));
        let y = conv2d(&mut tape, &x, &w, None, ConvSpec::same(3, 1).unwrap()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 5, 5));
        for kh in 0..3 {
            for kw in 0..3 {
                assert_eq!(y.data()[(3 - kh) * 5 + (3 - kw)], wdata[kh * 3 + kw]);
            }
        }
        let painted: f64 = wdata.iter().sum();
        let total: f64 = y.data().iter().sum();
        assert_eq!(total, painted);
    }

    #[test]
    fn conv_bias_adds_per_channel() {
        let mut tape = Tape::inference();
        let x = tape.constant(rand_vec(18, 50), Shape::new(1, 2, 3, 3));
        let w = tape.constant(vec![0.0; 6], Shape::new(3, 2, 1, 1));
        let b = tape.constant(vec![1.0, -2.0, 0.5], Shape::vec(3));
        let y = conv2d(&mut tape, &x, &w, Some(&b), ConvSpec::pointwise()).unwrap();
        for c in 0..3 {
            for &v in &y.data()[c * 9..(c + 1) * 9] {
                assert_eq!(v, b.data()[c]);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_channel_and_group_setups() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(vec![0.0; 32], Shape::new(1, 2, 4, 4));
        let w = tape.constant(vec![0.0; 27], Shape::new(1, 3, 3, 3));
        assert!(matches!(
            conv2d(&mut tape, &x, &w, None, ConvSpec::same(3, 1).unwrap()),
            Err(TensorError::ChannelMismatch { expected: 3, got: 2 })
        ));
        let w2 = tape.constant(vec![0.0; 18], Shape::new(2, 1, 3, 3));
        assert!(matches!(
            conv2d(&mut tape, &x, &w2, None, ConvSpec::same(3, 1).unwrap().with_groups(3)),
            Err(TensorError::BadGroups { channels: 2, groups: 3 })
        ));
    }

    #[test]
    fn grouped_conv_equals_dense_convs_on_each_half() {
        let mut tape = Tape::inference();
        let x = tape.constant(rand_vec(1 * 4 * 5 * 5, 51), Shape::new(1, 4, 5, 5));
        let w = tape.constant(rand_vec(6 * 2 * 3 * 3, 52), Shape::new(6, 2, 3, 3));
        let spec = ConvSpec::same(3, 1).unwrap().with_groups(2);
        let y = conv2d(&mut tape, &x, &w, None, spec).unwrap();

        let lo = slice_channels(&mut tape, &x, 0, 2);
        let hi = slice_channels(&mut tape, &x, 2, 4);
        let w_lo = tape.constant(w.data()[..54].to_vec(), Shape::new(3, 2, 3, 3));
        let w_hi = tape.constant(w.data()[54..].to_vec(), Shape::new(3, 2, 3, 3));
        let dense = ConvSpec::same(3, 1).unwrap();
        let y_lo = conv2d(&mut tape, &lo, &w_lo, None, dense).unwrap();
        let y_hi = conv2d(&mut tape, &hi, &w_hi, None, dense).unwrap();
        let y_ref = concat_channels(&mut tape, &[&y_lo, &y_hi]).unwrap();
        for (a, b) in y.data().iter().zip(y_ref.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_conv_matches_direct_loops() {
        let (c, h, wd, k, pad, dil) = (3, 6, 5, 3, 2, 2);
        let mut tape = Tape::inference();
        let xd = rand_vec(2 * c * h * wd, 53);
        let wdt = rand_vec(c * k * k, 54);
        let x = tape.constant(xd.clone(), Shape::new(2, c, h, wd));
        let w = tape.constant(wdt.clone(), Shape::new(c, 1, k, k));
        let spec = ConvSpec { kernel: k, padding: pad, dilation: dil, groups: c };
        let y = conv2d(&mut tape, &x, &w, None, spec).unwrap();

        let (ho, wo) = (h + 2 * pad - dil * (k - 1), wd + 2 * pad - dil * (k - 1));
        assert_eq!(y.shape(), Shape::new(2, c, ho, wo));
        for n in 0..2 {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = oh as isize + (kh * dil) as isize - pad as isize;
                                let iw = ow as isize + (kw * dil) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += wdt[(ci * k + kh) * k + kw]
                                    * xd[((n * c + ci) * h + ih as usize) * wd + iw as usize];
                            }
                        }
                        let got = y.data()[((n * c + ci) * ho + oh) * wo + ow];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_grads_match_finite_differences_dense() {
        let x = Param::new("x", Shape::new(2, 3, 5, 4), rand_vec(120, 60));
        let w = Param::new("w", Shape::new(2, 3, 3, 3), rand_vec(54, 61));
        let b = Param::new("b", Shape::vec(2), rand_vec(2, 62));
        let check = grad_check(&[x.clone(), w.clone(), b.clone()], 1e-5, None, 43, |tape| {
            let (xt, wt, bt) = (x.leaf(tape), w.leaf(tape), b.leaf(tape));
            let y = conv2d(tape, &xt, &wt, Some(&bt), ConvSpec::same(3, 1).unwrap()).unwrap();
            pinned_loss(tape, &y, 15)
        });
        check.assert_below(1e-6);
    }

    #[test]
    fn conv_grads_match_finite_differences_dilated() {
        let x = Param::new("x", Shape::new(1, 2, 9, 8), rand_vec(144, 63));
        let w = Param::new("w", Shape::new(2, 2, 5, 5), rand_vec(100, 64));
        let check = grad_check(&[x.clone(), w.clone()], 1e-5, None, 47, |tape| {
            let (xt, wt) = (x.leaf(tape), w.leaf(tape));
            let y = conv2d(tape, &xt, &wt, None, ConvSpec::same(5, 2).unwrap()).unwrap();
            pinned_loss(tape, &y, 16)
        });
        check.assert_below(1e-6);
    }

    #[test]
    fn conv_grads_match_finite_differences_grouped() {
        let x = Param::new("x", Shape::new(2, 4, 5, 5), rand_vec(200, 65));
        let w = Param::new("w", Shape::new(6, 2, 3, 3), rand_vec(108, 66));
        let b = Param::new("b", Shape::vec(6), rand_vec(6, 67));
        let spec = ConvSpec::same(3, 1).unwrap().with_groups(2);
        let check = grad_check(&[x.clone(), w.clone(), b.clone()], 1e-5, None, 53, |tape| {
            let (xt, wt, bt) = (x.leaf(tape), w.leaf(tape), b.leaf(tape));
            let y = conv2d(tape, &xt, &wt, Some(&bt), spec).unwrap();
            pinned_loss(tape, &y, 17)
        });
        check.assert_below(1e-6);
    }

    #[test]
    fn conv_grads_match_finite_differences_depthwise() {
        let x = Param::new("x", Shape::new(2, 3, 6, 6), rand_vec(216, 68));
        let w = Param::new("w", Shape::new(3, 1, 3, 3), rand_vec(27, 69));
        let spec = ConvSpec { kernel: 3, padding: 2, dilation: 2, groups: 3 };
        let check = grad_check(&[x.clone(), w.clone()], 1e-5, None, 59, |tape| {
            let (xt, wt) = (x.leaf(tape), w.leaf(tape));
            let y = conv2d(tape, &xt, &wt, None, spec).unwrap();
            pinned_loss(tape, &y, 18)
        });
        check.assert_below(1e-6);
    }

    #[test]
    fn separable_conv_equals_composed_dense_conv() {
        // depthwise(k) then pointwise(1) is one dense conv whose weight is
        // w[co][ci][kh][kw] = pw[co][ci] * dw[ci][kh][kw].
        let (c_in, c_out, k) = (3, 4, 5);
        let mut tape = Tape::inference();
        let x = tape.constant(rand_vec(2 * c_in * 7 * 6, 70), Shape::new(2, c_in, 7, 6));
        let dwd = rand_vec(c_in * k * k, 71);
        let pwd = rand_vec(c_out * c_in, 72);
        let dw = tape.constant(dwd.clone(), Shape::new(c_in, 1, k, k));
        let pw = tape.constant(pwd.clone(), Shape::new(c_out, c_in, 1, 1));
        let y = separable_conv(&mut tape, &x, &dw, &pw, None, k, 2).unwrap();

        let mut dense = vec![0.0; c_out * c_in * k * k];
        for co in 0..c_out {
            for ci in 0..c_in {
                for t in 0..k * k {
                    dense[(co * c_in + ci) * k * k + t] = pwd[co * c_in + ci] * dwd[ci * k * k + t];
                }
            }
        }
        let wd = tape.constant(dense, Shape::new(c_out, c_in, k, k));
        let y_ref = conv2d(&mut tape, &x, &wd, None, ConvSpec::same(k, 2).unwrap()).unwrap();
        assert_eq!(y.shape(), y_ref.shape());
        for (a, b) in y.data().iter().zip(y_ref.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_conv_grads_match_finite_differences() {
        let x = Param::new("x", Shape::new(1, 3, 5, 5), rand_vec(75, 73));
        let dw = Param::new("dw", Shape::new(3, 1, 3, 3), rand_vec(27, 74));
        let pw = Param::new("pw", Shape::new(2, 3, 1, 1), rand_vec(6, 75));
        let b = Param::new("b", Shape::vec(2), rand_vec(2, 76));
        let check =
            grad_check(&[x.clone(), dw.clone(), pw.clone(), b.clone()], 1e-5, None, 61, |tape| {
                let (xt, dwt, pwt, bt) = (x.leaf(tape), dw.leaf(tape), pw.leaf(tape), b.leaf(tape));
                let y = separable_conv(tape, &xt, &dwt, &pwt, Some(&bt), 3, 1).unwrap();
                pinned_loss(tape, &y, 19)
            });
        check.assert_below(1e-6);
    }

    // ── batch norm ──

    #[test]
    fn batch_norm_normalizes_in_training_mode() {
        let shape = Shape::new(4, 2, 3, 3);
        let data: Vec<f64> = rand_vec(shape.numel(), 80).iter().map(|v| 3.0 * v + 1.5).collect();
        let mut tape = Tape::inference();
        let x = tape.constant(data, shape);
        let mut stats = BnStats::new(2);
        let y = batch_norm(&mut tape, &x, None, None, &mut stats, BnCfg::default(), true);
        let m = (shape.n * shape.hw()) as f64;
        for c in 0..2 {
            let mut mean = 0.0;
            let mut sq = 0.0;
            for i in 0..shape.n {
                for &v in &y.data()[(i * 2 + c) * 9..][..9] {
                    mean += v;
                    sq += v * v;
                }
            }
            mean /= m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-12, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_running_stats_blend() {
        // From (mean 0, var 1), a constant batch of 2s with momentum 0.1
        // moves the stats to mean 0.2, var 0.9.
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(vec![2.0; 8], Shape::new(2, 1, 2, 2));
        let mut stats = BnStats::new(1);
        batch_norm(&mut tape, &x, None, None, &mut stats, BnCfg::default(), true);
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(vec![5.0], Shape::new(1, 1, 1, 1));
        let g = tape.constant(vec![2.0], Shape::vec(1));
        let b = tape.constant(vec![0.5], Shape::vec(1));
        let mut stats = BnStats { mean: vec![1.0], var: vec![3.0] };
        let cfg = BnCfg::default();
        let y = batch_norm(&mut tape, &x, Some(&g), Some(&b), &mut stats, cfg, false);
        let expect = 2.0 * (5.0 - 1.0) / (3.0 + cfg.eps).sqrt() + 0.5;
        assert!((y.item() - expect).abs() < 1e-12);
        // Eval mode never touches the stats.
        assert_eq!(stats.mean[0], 1.0);
        assert_eq!(stats.var[0], 3.0);
    }

    #[test]
    fn batch_norm_grads_match_finite_differences_training() {
        let shape = Shape::new(3, 2, 3, 3);
        let x = Param::new("x", shape, rand_vec(shape.numel(), 81));
        let g = Param::new("g", Shape::vec(2), vec![1.2, 0.7]);
        let b = Param::new("b", Shape::vec(2), vec![0.1, -0.4]);
        let check = grad_check(&[x.clone(), g.clone(), b.clone()], 1e-5, None, 67, |tape| {
            let (xt, gt, bt) = (x.leaf(tape), g.leaf(tape), b.leaf(tape));
            let mut stats = BnStats::new(2);
            let y = batch_norm(tape, &xt, Some(&gt), Some(&bt), &mut stats, BnCfg::default(), true);
            pinned_loss(tape, &y, 21)
        });
        check.assert_below(1e-6);

        // Without the affine pair.
        let check = grad_check(&[x.clone()], 1e-5, None, 71, |tape| {
            let xt = x.leaf(tape);
            let mut stats = BnStats::new(2);
            let y = batch_norm(tape, &xt, None, None, &mut stats, BnCfg::default(), true);
            pinned_loss(tape, &y, 22)
        });
        check.assert_below(1e-6);
    }

    #[test]
    fn batch_norm_grads_match_finite_differences_eval() {
        let shape = Shape::new(2, 2, 2, 2);
        let x = Param::new("x", shape, rand_vec(shape.numel(), 82));
        let g = Param::new("g", Shape::vec(2), vec![0.9, 1.1]);
        let b = Param::new("b", Shape::vec(2), vec![-0.2, 0.3]);
        let stats = BnStats { mean: vec![0.2, -0.1], var: vec![1.5, 0.8] };
        let check = grad_check(&[x.clone(), g.clone(), b.clone()], 1e-5, None, 73, |tape| {
            let (xt, gt, bt) = (x.leaf(tape), g.leaf(tape), b.leaf(tape));
            let mut s = stats.clone();
            let y = batch_norm(tape, &xt, Some(&gt), Some(&bt), &mut s, BnCfg::default(), false);
            pinned_loss(tape, &y, 23)
        });
        check.assert_below(1e-7);
    }

    // ── bicubic resize ──

    #[test]
    fn bicubic_same_size_is_identity() {
        let mut tape = Tape::inference();
        let data = rand_vec(2 * 3 * 4 * 5, 90);
        let x = tape.constant(data.clone(), Shape::new(2, 3, 4, 5));
        let y = bicubic_resize(&mut tape, &x, 4, 5);
        assert_eq!(y.data(), &data[..]);
    }

    #[test]
    fn bicubic_preserves_constants() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(vec![0.37; 1 * 1 * 8 * 8], Shape::new(1, 1, 8, 8));
        let up = bicubic_resize(&mut tape, &x, 17, 23);
        for &v in up.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_reproduces_linear_ramps_in_the_interior() {
        // A Catmull-Rom kernel interpolates degree-1 polynomials exactly;
        // only border clamping deviates.
        let n_in = 16;
        let mut tape = Tape::inference();
        let ramp: Vec<f64> = (0..n_in).map(|i| i as f64).collect();
        let x = tape.constant(ramp, Shape::new(1, 1, 1, n_in));
        let n_out = 40;
        let y = bicubic_resize(&mut tape, &x, 1, n_out);
        let scale = n_in as f64 / n_out as f64;
        for o in 0..n_out {
            let src = (o as f64 + 0.5) * scale - 0.5;
            if src >= 1.0 && src <= (n_in - 3) as f64 {
                assert!((y.data()[o] - src).abs() < 1e-12, "at {o}: {} vs {src}", y.data()[o]);
            }
        }
    }

    #[test]
    fn bicubic_grads_match_finite_differences() {
        let x = Param::new("x", Shape::new(1, 2, 6, 5), rand_vec(60, 91));
        // Down then up exercises both tap tables.
        let check = grad_check(&[x.clone()], 1e-5, None, 79, |tape| {
            let xt = x.leaf(tape);
            let small = bicubic_resize(tape, &xt, 3, 3);
            let big = bicubic_resize(tape, &small, 7, 8);
            pinned_loss(tape, &big, 24)
        });
        check.assert_below(1e-8);
    }

    // ── tape semantics ──

    #[test]
    fn gradients_accumulate_across_consumers() {
        let p = Param::new("x", Shape::vec(2), vec![3.0, -1.0]);
        let mut tape = Tape::new();
        let t = p.leaf(&mut tape);
        let doubled = add(&mut tape, &t, &t);
        let loss = sum_all(&mut tape, &doubled);
        tape.backward(&loss).unwrap();
        assert_eq!(p.grad(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_consumes_the_tape() {
        let p = Param::new("x", Shape::vec(1), vec![2.0]);
        let mut tape = Tape::new();
        let t = p.leaf(&mut tape);
        let loss = sum_all(&mut tape, &t);
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn untracked_loss_is_rejected() {
        let mut tape = Tape::new();
        let c = tape.constant(vec![1.0, 2.0], Shape::vec(2));
        let loss = sum_all(&mut tape, &c);
        assert!(!loss.requires_grad());
        assert!(matches!(tape.backward(&loss), Err(TensorError::NotTracked)));
    }

    #[test]
    fn inference_tape_never_tracks() {
        let p = Param::new("x", Shape::vec(3), vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::inference();
        let t = p.leaf(&mut tape);
        assert!(!t.requires_grad());
        let y = leaky_relu(&mut tape, &t, 0.2);
        assert!(!y.requires_grad());
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let x = Param::new("x", Shape::new(2, 3, 6, 6), rand_vec(216, 95));
            let w = Param::new("w", Shape::new(4, 3, 3, 3), rand_vec(108, 96));
            let g = Param::new("g", Shape::vec(4), vec![1.0; 4]);
            let b = Param::new("b", Shape::vec(4), vec![0.0; 4]);
            let mut tape = Tape::new();
            let (xt, wt, gt, bt) =
                (x.leaf(&mut tape), w.leaf(&mut tape), g.leaf(&mut tape), b.leaf(&mut tape));
            let c = conv2d(&mut tape, &xt, &wt, None, ConvSpec::same(3, 1).unwrap()).unwrap();
            let mut stats = BnStats::new(4);
            let n =
                batch_norm(&mut tape, &c, Some(&gt), Some(&bt), &mut stats, BnCfg::default(), true);
            let a = leaky_relu(&mut tape, &n, 0.2);
            let loss = mean_all(&mut tape, &a);
            tape.backward(&loss).unwrap();
            (x.grad(), w.grad(), g.grad(), b.grad())
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
    }
}
