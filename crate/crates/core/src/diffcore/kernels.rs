//! Raw slice kernels shared by the forward and backward passes.
//!
//! All buffers are row-major. Accumulating kernels (`+=`) leave the caller in
//! charge of zeroing outputs.

use super::tensor::Real;

/// Strided `c += op(a) * op(b)`; all three kernels below route through here.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], rsa: usize, csa: usize, b: &[T], rsb: usize, csb: usize, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the extents and strides describe dense m*k, k*n and m*n
    // blocks, checked against the slice lengths above; `c` is a unique borrow.
    unsafe {
        T::gemm_acc(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm(m, k, n, a, k, 1, b, n, 1, c);
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm(m, k, n, a, k, 1, b, 1, k, c);
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm(m, k, n, a, 1, m, b, n, 1, c);
}

pub fn transpose2d<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when the unfolded matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[C,H,W]` into `[C*kh*kw, out_h*out_w]` with zero padding.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `dx` (accumulating).
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Half-open input range `[start, end)` covered by adaptive bin `i` of `bins`.
pub fn adaptive_bin(i: usize, bins: usize, extent: usize) -> (usize, usize) {
    let start = (i * extent) / bins;
    let end = ((i + 1) * extent).div_ceil(bins);
    (start, end)
}

/// Source taps for align-corners-false bilinear resampling along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

pub fn bilinear_taps<T: Real>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = T::lit(in_len as f64) / T::lit(out_len as f64);
    let half = T::lit(0.5);
    (0..out_len)
        .map(|o| {
            let mut src = (T::lit(o as f64) + half) * scale - half;
            if src < T::zero() {
                src = T::zero();
            }
            let lo = src.floor().to_usize().unwrap_or(0).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - T::lit(lo as f64);
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resample of one `[h, w]` plane to `[oh, ow]` (align corners false).
pub fn bilinear_plane<T: Real>(src: &[T], h: usize, w: usize, ty: &[Tap<T>], tx: &[Tap<T>], out: &mut [T]) {
    let ow = tx.len();
    for (oy, ry) in ty.iter().enumerate() {
        let r0 = &src[ry.lo * w..(ry.lo + 1) * w];
        let r1 = &src[ry.hi * w..(ry.hi + 1) * w];
        for (ox, rx) in tx.iter().enumerate() {
            let top = r0[rx.lo] + (r0[rx.hi] - r0[rx.lo]) * rx.frac;
            let bot = r1[rx.lo] + (r1[rx.hi] - r1[rx.lo]) * rx.frac;
            out[oy * ow + ox] = top + (bot - top) * ry.frac;
        }
    }
    debug_assert!(src.len() >= h * w);
}
