//! Raw convolution and resampling kernels over flat slices.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::scalar::Scalar;

/// Geometry of a 2-D convolution over one `[c, h, w]` image producing an
/// `oh x ow` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output positions `o` whose source `o * stride + tap - pad`
    /// falls inside `[0, len)`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + tap >= pad
        let lo = if tap >= self.pad { 0 } else { (self.pad - tap).div_ceil(s) };
        // largest o with o*s + tap - pad <= len - 1
        let hi = if len + self.pad > tap {
            ((len + self.pad - tap - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfold `img` (`[c, h, w]`) into `cols` (`[c*k*k, oh*ow]`).
#[cfg(test)]
pub(crate) fn im2col<F: Scalar>(img: &[F], g: &ConvGeom, cols: &mut [F]) {
    im2col_rows(img, g, 0, g.oh, cols);
}

/// [`im2col`] restricted to output rows `oy0..oy1`; `cols` is
/// `[c*k*k, (oy1-oy0)*ow]`.
pub(crate) fn im2col_rows<F: Scalar>(img: &[F], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [F]) {
    let plane = (oy1 - oy0) * g.ow;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    for c in 0..g.c {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.k {
            let (y_lo, y_hi) = g.valid_range(i, g.h, g.oh);
            for j in 0..g.k {
                let row = (c * g.k + i) * g.k + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (x_lo, x_hi) = g.valid_range(j, g.w, g.ow);
                for oy in oy0..oy1 {
                    let line = &mut dst[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    if oy < y_lo || oy >= y_hi {
                        line.fill(F::zero());
                        continue;
                    }
                    let iy = oy * g.stride + i - g.pad;
                    let src_line = &src[iy * g.w..(iy + 1) * g.w];
                    line[..x_lo].fill(F::zero());
                    line[x_hi..].fill(F::zero());
                    if g.stride == 1 {
                        let x0 = x_lo + j - g.pad;
                        line[x_lo..x_hi].copy_from_slice(&src_line[x0..x0 + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            line[ox] = src_line[ox * g.stride + j - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `cols` back into `img`.
#[cfg(test)]
pub(crate) fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, img: &mut [F]) {
    col2im_rows(cols, g, 0, g.oh, img);
}

/// Adjoint of [`im2col_rows`].
pub(crate) fn col2im_rows<F: Scalar>(cols: &[F], g: &ConvGeom, oy0: usize, oy1: usize, img: &mut [F]) {
    let plane = (oy1 - oy0) * g.ow;
    for c in 0..g.c {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.k {
            let (y_lo, y_hi) = g.valid_range(i, g.h, g.oh);
            for j in 0..g.k {
                let row = (c * g.k + i) * g.k + j;
                let src = &cols[row * plane..(row + 1) * plane];
                let (x_lo, x_hi) = g.valid_range(j, g.w, g.ow);
                for oy in y_lo.max(oy0)..y_hi.min(oy1) {
                    let iy = oy * g.stride + i - g.pad;
                    let line = &src[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    let dst_line = &mut dst[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let x0 = x_lo + j - g.pad;
                        for (d, &v) in dst_line[x0..x0 + (x_hi - x_lo)].iter_mut().zip(&line[x_lo..x_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in x_lo..x_hi {
                            dst_line[ox * g.stride + j - g.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bytes of unfolded columns processed per GEMM; keeps each block in L2.
const COL_BLOCK_BYTES: usize = 512 * 1024;

/// Output-row blocks `(oy0, oy1)` whose unfolded columns fit the block size.
fn row_blocks(g: &ConvGeom, elem: usize) -> impl Iterator<Item = (usize, usize)> {
    let per_row = g.col_rows() * g.ow * elem;
    let step = (COL_BLOCK_BYTES / per_row.max(1)).clamp(1, g.oh.max(1));
    let oh = g.oh;
    (0..oh).step_by(step).map(move |r| (r, (r + step).min(oh)))
}

/// `y[o, :] = w[o, :] . cols + bias[o]` for one image.
pub(crate) fn conv_forward_item<F: Scalar>(
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    out_ch: usize,
    g: &ConvGeom,
    scratch: &mut Vec<F>,
    y: &mut [F],
) {
    let rows = g.col_rows();
    let plane = g.col_cols();
    if g.is_pointwise() {
        F::gemm(
            out_ch,
            rows,
            plane,
            F::one(),
            weight,
            (rows as isize, 1),
            x,
            (plane as isize, 1),
            F::zero(),
            y,
            (plane as isize, 1),
        );
    } else {
        for (oy0, oy1) in row_blocks(g, core::mem::size_of::<F>()) {
            let cols_n = (oy1 - oy0) * g.ow;
            scratch.resize(rows * cols_n, F::zero());
            im2col_rows(x, g, oy0, oy1, scratch);
            F::gemm(
                out_ch,
                rows,
                cols_n,
                F::one(),
                weight,
                (rows as isize, 1),
                scratch,
                (cols_n as isize, 1),
                F::zero(),
                &mut y[oy0 * g.ow..],
                (plane as isize, 1),
            );
        }
    }
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate() {
            for v in &mut y[o * plane..(o + 1) * plane] {
                *v += bo;
            }
        }
    }
}

/// Accumulates weight gradients and, when `dx` is given, input gradients of
/// a convolution for one image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_item<F: Scalar>(
    x: &[F],
    weight: &[F],
    dy: &[F],
    out_ch: usize,
    g: &ConvGeom,
    scratch: &mut Vec<F>,
    dw: Option<&mut [F]>,
    dx: Option<&mut [F]>,
) {
    let rows = g.col_rows();
    let plane = g.col_cols();
    if g.is_pointwise() {
        if let Some(dw) = dw {
            // dw[o, r] += sum_p dy[o, p] * x[r, p]
            F::gemm(
                out_ch,
                plane,
                rows,
                F::one(),
                dy,
                (plane as isize, 1),
                x,
                (1, plane as isize),
                F::one(),
                dw,
                (rows as isize, 1),
            );
        }
        if let Some(dx) = dx {
            F::gemm(
                rows,
                out_ch,
                plane,
                F::one(),
                weight,
                (1, rows as isize),
                dy,
                (plane as isize, 1),
                F::one(),
                dx,
                (plane as isize, 1),
            );
        }
        return;
    }
    let (mut dw, mut dx) = (dw, dx);
    for (oy0, oy1) in row_blocks(g, core::mem::size_of::<F>()) {
        let cols_n = (oy1 - oy0) * g.ow;
        let dy_blk = &dy[oy0 * g.ow..];
        scratch.resize(rows * cols_n, F::zero());
        if let Some(dw) = dw.as_deref_mut() {
            im2col_rows(x, g, oy0, oy1, scratch);
            F::gemm(
                out_ch,
                cols_n,
                rows,
                F::one(),
                dy_blk,
                (plane as isize, 1),
                scratch,
                (1, cols_n as isize),
                F::one(),
                dw,
                (rows as isize, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            F::gemm(
                rows,
                out_ch,
                cols_n,
                F::one(),
                weight,
                (1, rows as isize),
                dy_blk,
                (plane as isize, 1),
                F::zero(),
                scratch,
                (cols_n as isize, 1),
            );
            col2im_rows(scratch, g, oy0, oy1, dx);
        }
    }
}

/// Transposed convolution of one image. `g` describes the adjoint forward
/// convolution: image = the `[out_ch, oh', ow']` output, grid = the input
/// `h x w`. `weight` is `[in_ch, out_ch*k*k]`.
pub(crate) fn deconv_forward_item<F: Scalar>(
    x: &[F],
    weight: &[F],
    in_ch: usize,
    g: &ConvGeom,
    scratch: &mut Vec<F>,
    y: &mut [F],
) {
    let rows = g.col_rows();
    let plane = g.col_cols();
    y.fill(F::zero());
    for (oy0, oy1) in row_blocks(g, core::mem::size_of::<F>()) {
        let cols_n = (oy1 - oy0) * g.ow;
        scratch.resize(rows * cols_n, F::zero());
        F::gemm(
            rows,
            in_ch,
            cols_n,
            F::one(),
            weight,
            (1, rows as isize),
            &x[oy0 * g.ow..],
            (plane as isize, 1),
            F::zero(),
            scratch,
            (cols_n as isize, 1),
        );
        col2im_rows(scratch, g, oy0, oy1, y);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_backward_item<F: Scalar>(
    x: &[F],
    weight: &[F],
    dy: &[F],
    in_ch: usize,
    g: &ConvGeom,
    scratch: &mut Vec<F>,
    dw: Option<&mut [F]>,
    dx: Option<&mut [F]>,
) {
    let rows = g.col_rows();
    let plane = g.col_cols();
    let (mut dw, mut dx) = (dw, dx);
    for (oy0, oy1) in row_blocks(g, core::mem::size_of::<F>()) {
        let cols_n = (oy1 - oy0) * g.ow;
        scratch.resize(rows * cols_n, F::zero());
        im2col_rows(dy, g, oy0, oy1, scratch);
        if let Some(dw) = dw.as_deref_mut() {
            F::gemm(
                in_ch,
                cols_n,
                rows,
                F::one(),
                &x[oy0 * g.ow..],
                (plane as isize, 1),
                scratch,
                (1, cols_n as isize),
                F::one(),
                dw,
                (rows as isize, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            F::gemm(
                in_ch,
                rows,
                cols_n,
                F::one(),
                weight,
                (rows as isize, 1),
                scratch,
                (cols_n as isize, 1),
                F::one(),
                &mut dx[oy0 * g.ow..],
                (plane as isize, 1),
            );
        }
    }
}

/// Source taps of ×2 bilinear upsampling with half-pixel centres
/// (`align_corners = false`): `(i0, i1, w0, w1)` per output index.
pub(crate) fn bilinear_taps<F: Scalar>(in_len: usize) -> Vec<(usize, usize, F, F)> {
    let mut taps = vec![(0, 0, F::zero(), F::zero()); in_len * 2];
    for (o, tap) in taps.iter_mut().enumerate() {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
        let l1 = src - i0 as f64;
        *tap = (i0, i1, F::of(1.0 - l1), F::of(l1));
    }
    taps
}

pub(crate) fn bilinear_up2_plane<F: Scalar>(
    src: &[F],
    w: usize,
    ty: &[(usize, usize, F, F)],
    tx: &[(usize, usize, F, F)],
    dst: &mut [F],
) {
    let ow = 2 * w;
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        let line = &mut dst[oy * ow..(oy + 1) * ow];
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            line[ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
        }
    }
}

pub(crate) fn bilinear_up2_plane_backward<F: Scalar>(
    dy: &[F],
    w: usize,
    ty: &[(usize, usize, F, F)],
    tx: &[(usize, usize, F, F)],
    dx: &mut [F],
) {
    let ow = 2 * w;
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        let line = &dy[oy * ow..(oy + 1) * ow];
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let g = line[ox];
            dx[y0 * w + x0] += wy0 * wx0 * g;
            dx[y0 * w + x1] += wy0 * wx1 * g;
            dx[y1 * w + x0] += wy1 * wx0 * g;
            dx[y1 * w + x1] += wy1 * wx1 * g;
        }
    }
}
