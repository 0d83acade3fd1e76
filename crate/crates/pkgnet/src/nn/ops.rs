//! Low-level tensor kernels: im2col / col2im and the data reorderings that
//! let every convolution variant run as one GEMM per batch.
//!
//! Layout conventions used throughout:
//! - activations are `(N, C, H, W)`; non-contiguous views are copied to
//!   standard (row-major) layout on entry;
//! - a column matrix is `(C*k*k, N*GH*GW)` with column index `(n*GH + gi)*GW + gj`
//!   and row index `(c*k + kh)*k + kw`, where `(GH, GW)` is the sliding-window
//!   grid of the underlying convolution.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut2};

/// Output extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    stride * (input - 1) + k - 2 * pad
}

/// Gather sliding windows of `x` into a column matrix over an explicit grid.
///
/// The grid is passed explicitly because the same gather serves both the
/// forward convolution (grid = conv output dims of `x`) and the transposed
/// convolution backward pass (grid = the transposed layer's *input* dims).
/// Out-of-bounds taps read as zero.
pub fn im2col(
    x: &ArrayView4<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let cols = n * grid_h * grid_w;
    let mut out = Array2::<f32>::zeros((c * k * k, cols));
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();

    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let row_base = row * cols;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for gi in 0..grid_h {
                        let ih = (gi * stride + kh) as isize - pad as isize;
                        let col_base = row_base + (ni * grid_h + gi) * grid_w;
                        if ih < 0 || ih >= h as isize {
                            continue; // stays zero
                        }
                        let x_row = x_base + ih as usize * w;
                        for gj in 0..grid_w {
                            let iw = (gj * stride + kw) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                os[col_base + gj] = xs[x_row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add a column matrix back to an `(N, C, H, W)` tensor.
/// Exact adjoint of [`im2col`] with the same grid.
#[allow(clippy::too_many_arguments)] // bare convolution geometry
pub fn col2im(
    col: &ArrayView2<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array4<f32> {
    let cols = n * grid_h * grid_w;
    debug_assert_eq!(col.dim(), (c * k * k, cols));
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    let col = col.as_standard_layout();
    let cs = col.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();

    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let row_base = row * cols;
                for ni in 0..n {
                    let o_base = (ni * c + ci) * h * w;
                    for gi in 0..grid_h {
                        let ih = (gi * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let o_row = o_base + ih as usize * w;
                        let col_base = row_base + (ni * grid_h + gi) * grid_w;
                        for gj in 0..grid_w {
                            let iw = (gj * stride + kw) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                os[o_row + iw as usize] += cs[col_base + gj];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reorder `(N, C, H, W)` into a `(C, N*H*W)` matrix (column index `(n*H + h)*W + w`).
pub fn nchw_to_c_nhw(x: &ArrayView4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let mut out = Array2::<f32>::zeros((c, n * hw));
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * hw;
            let dst = ci * (n * hw) + ni * hw;
            os[dst..dst + hw].copy_from_slice(&xs[src..src + hw]);
        }
    }
    out
}

/// Inverse of [`nchw_to_c_nhw`].
pub fn c_nhw_to_nchw(m: &ArrayView2<f32>, n: usize, h: usize, w: usize) -> Array4<f32> {
    let (c, cols) = m.dim();
    let hw = h * w;
    debug_assert_eq!(cols, n * hw);
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    let m = m.as_standard_layout();
    let ms = m.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let src = ci * cols + ni * hw;
            let dst = (ni * c + ci) * hw;
            os[dst..dst + hw].copy_from_slice(&ms[src..src + hw]);
        }
    }
    out
}

/// Copy a `(C, N*GH*GW)` matrix into `(N, C, GH, GW)`; used after the forward GEMM.
pub fn matrix_to_nchw(m: &ArrayView2<f32>, n: usize, gh: usize, gw: usize) -> Array4<f32> {
    c_nhw_to_nchw(m, n, gh, gw)
}

/// `c = a . b` into a fresh matrix.
pub fn matmul(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    let mut c = Array2::<f32>::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(1.0, a, b, 0.0, &mut c);
    c
}

/// `c += a . b` in place.
pub fn matmul_acc(a: &ArrayView2<f32>, b: &ArrayView2<f32>, c: &mut ArrayViewMut2<f32>) {
    ndarray::linalg::general_mat_mul(1.0, a, b, 1.0, c);
}
