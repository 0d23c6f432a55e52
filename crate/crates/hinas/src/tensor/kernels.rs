//! Raw convolution kernels: im2col/col2im lowering and strided GEMM wrappers.
//!
//! All convolutions in the crate are stride-1; padding is implicit zeros and
//! dilation is folded into the gather offsets. The lowered `col` matrix has
//! one row per `(channel, kh, kw)` tap — matching the row-major flattening of
//! conv weights — and one column per output pixel, so a convolution is a
//! single GEMM per (item, group).

use crate::scalar::Scalar;

/// `C(m x n) = alpha * A(m x k) @ B(k x n) + beta * C`, all row-major.
pub fn matmul<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// As [`matmul`], but `a` holds the transpose of A: storage is `(k x m)`
/// row-major.
pub fn matmul_tn<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// As [`matmul`], but `b` holds the transpose of B: storage is `(n x k)`
/// row-major.
pub fn matmul_nt<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one stride-1 convolution application.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: usize,
    pub padding: usize,
    pub dilation: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        h_in: usize,
        w_in: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        let span = dilation * (kernel - 1);
        let h_out = (h_in + 2 * padding).saturating_sub(span);
        let w_out = (w_in + 2 * padding).saturating_sub(span);
        ConvGeom { channels, h_in, w_in, kernel, padding, dilation, h_out, w_out }
    }

    /// Rows of the lowered matrix: one per `(channel, kh, kw)` tap.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_len(&self) -> usize {
        self.col_rows() * self.h_out * self.w_out
    }
}

/// Lowers one item `x` of shape `(channels, h_in, w_in)` into `col`
/// (`col_rows x h_out*w_out`, row-major). Every cell is written; padding
/// regions become zeros.
pub fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    debug_assert_eq!(x.len(), g.channels * g.h_in * g.w_in);
    debug_assert!(col.len() >= g.col_len());
    let (h_out, w_out) = (g.h_out, g.w_out);
    let ow_len = h_out * w_out;
    for ci in 0..g.channels {
        let x_ch = &x[ci * g.h_in * g.w_in..][..g.h_in * g.w_in];
        for kh in 0..g.kernel {
            let dh = (kh * g.dilation) as isize - g.padding as isize;
            for kw in 0..g.kernel {
                let dw = (kw * g.dilation) as isize - g.padding as isize;
                let row = (ci * g.kernel + kh) * g.kernel + kw;
                let dst = &mut col[row * ow_len..][..ow_len];
                for oh in 0..h_out {
                    let ih = oh as isize + dh;
                    let dst_row = &mut dst[oh * w_out..][..w_out];
                    if ih < 0 || ih >= g.h_in as isize {
                        dst_row.fill(F::zero());
                        continue;
                    }
                    let src_row = &x_ch[ih as usize * g.w_in..][..g.w_in];
                    // Valid output columns satisfy 0 <= ow + dw < w_in.
                    let lo = (-dw).max(0) as usize;
                    let hi = (g.w_in as isize - dw).clamp(0, w_out as isize) as usize;
                    dst_row[..lo.min(w_out)].fill(F::zero());
                    if lo < hi {
                        dst_row[lo..hi].copy_from_slice(
                            &src_row[(lo as isize + dw) as usize..(hi as isize + dw) as usize],
                        );
                    }
                    dst_row[hi.max(lo)..].fill(F::zero());
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds `col` back into `dx` (one item,
/// `(channels, h_in, w_in)`). `dx` is accumulated, not overwritten.
pub fn col2im_add<F: Scalar>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    debug_assert_eq!(dx.len(), g.channels * g.h_in * g.w_in);
    debug_assert!(col.len() >= g.col_len());
    let (h_out, w_out) = (g.h_out, g.w_out);
    let ow_len = h_out * w_out;
    for ci in 0..g.channels {
        let dx_ch = &mut dx[ci * g.h_in * g.w_in..][..g.h_in * g.w_in];
        for kh in 0..g.kernel {
            let dh = (kh * g.dilation) as isize - g.padding as isize;
            for kw in 0..g.kernel {
                let dw = (kw * g.dilation) as isize - g.padding as isize;
                let row = (ci * g.kernel + kh) * g.kernel + kw;
                let src = &col[row * ow_len..][..ow_len];
                for oh in 0..h_out {
                    let ih = oh as isize + dh;
                    if ih < 0 || ih >= g.h_in as isize {
                        continue;
                    }
                    let src_row = &src[oh * w_out..][..w_out];
                    let dst_row = &mut dx_ch[ih as usize * g.w_in..][..g.w_in];
                    let lo = (-dw).max(0) as usize;
                    let hi = (g.w_in as isize - dw).clamp(0, w_out as isize) as usize;
                    for ow in lo..hi {
                        dst_row[(ow as isize + dw) as usize] += src_row[ow];
                    }
                }
            }
        }
    }
}
