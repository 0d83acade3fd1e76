//! Trainable layers (hand-written forward/backward) plus the forward-only
//! pieces the frozen teacher needs.

use ndarray::{s, Array1, Array2, Array4, ArrayView4};

use super::ops;

/// 2-D convolution. Weight layout `(out_ch, in_ch/groups, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

/// Forward-pass state a [`Conv2d`] needs to run backward.
pub struct ConvCache {
    col: Array2<f32>,
    n: usize,
    in_h: usize,
    in_w: usize,
    grid: (usize, usize),
}

impl Conv2d {
    pub fn new(w: Array4<f32>, b: Array1<f32>, stride: usize, pad: usize) -> Self {
        Self { w, b, stride, pad, groups: 1 }
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim().1 * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    fn w2(&self) -> Array2<f32> {
        let (oc, icg, k, _) = self.w.dim();
        self.w.view().into_shape_with_order((oc, icg * k * k)).unwrap().to_owned()
    }

    pub fn forward(&self, x: &ArrayView4<f32>) -> Array4<f32> {
        if self.groups == 1 {
            return self.forward_train(x).0;
        }
        // Grouped path is forward-only (used by ResNeXt teachers).
        let (n, c, h, w) = x.dim();
        let k = self.kernel();
        let (oc, icg, _, _) = self.w.dim();
        assert_eq!(c, icg * self.groups, "grouped conv channel mismatch");
        let ocg = oc / self.groups;
        let gh = ops::conv_out_dim(h, k, self.stride, self.pad);
        let gw = ops::conv_out_dim(w, k, self.stride, self.pad);
        let mut out2 = Array2::<f32>::zeros((oc, n * gh * gw));
        for g in 0..self.groups {
            let xg = x.slice(s![.., g * icg..(g + 1) * icg, .., ..]).to_owned();
            let col = ops::im2col(&xg.view(), k, self.stride, self.pad, gh, gw);
            let wg = self
                .w
                .slice(s![g * ocg..(g + 1) * ocg, .., .., ..])
                .to_owned()
                .into_shape_with_order((ocg, icg * k * k))
                .unwrap();
            let mut dst = out2.slice_mut(s![g * ocg..(g + 1) * ocg, ..]);
            ndarray::linalg::general_mat_mul(1.0, &wg.view(), &col.view(), 0.0, &mut dst);
        }
        for (mut row, bias) in out2.rows_mut().into_iter().zip(self.b.iter()) {
            row += *bias;
        }
        ops::matrix_to_nchw(&out2.view(), n, gh, gw)
    }

    pub fn forward_train(&self, x: &ArrayView4<f32>) -> (Array4<f32>, ConvCache) {
        assert_eq!(self.groups, 1, "training path supports groups == 1 only");
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channel mismatch");
        let k = self.kernel();
        let gh = ops::conv_out_dim(h, k, self.stride, self.pad);
        let gw = ops::conv_out_dim(w, k, self.stride, self.pad);
        let col = ops::im2col(x, k, self.stride, self.pad, gh, gw);
        let mut out2 = ops::matmul(&self.w2().view(), &col.view());
        for (mut row, bias) in out2.rows_mut().into_iter().zip(self.b.iter()) {
            row += *bias;
        }
        let y = ops::matrix_to_nchw(&out2.view(), n, gh, gw);
        (y, ConvCache { col, n, in_h: h, in_w: w, grid: (gh, gw) })
    }

    /// Returns `(grad_input, grad_w, grad_b)`.
    pub fn backward(&self, cache: &ConvCache, gy: &ArrayView4<f32>) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
        let (oc, icg, k, _) = self.w.dim();
        let (gh, gw) = cache.grid;
        let gy2 = ops::nchw_to_c_nhw(gy); // (OC, N*GH*GW)
        debug_assert_eq!(gy2.dim(), (oc, cache.n * gh * gw));

        let gb = Array1::from_iter(gy2.rows().into_iter().map(|r| r.sum()));
        let gw2 = ops::matmul(&gy2.view(), &cache.col.t());
        let gweight = gw2.into_shape_with_order((oc, icg, k, k)).unwrap();

        let gcol = ops::matmul(&self.w2().t(), &gy2.view());
        let gx = ops::col2im(
            &gcol.view(),
            cache.n,
            icg,
            cache.in_h,
            cache.in_w,
            k,
            self.stride,
            self.pad,
            gh,
            gw,
        );
        (gx, gweight, gb)
    }
}

/// 2-D transposed convolution. Weight layout `(in_ch, out_ch, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTransposeCache {
    x2: Array2<f32>, // (IC, N*H*W)
    n: usize,
    in_h: usize,
    in_w: usize,
}

impl ConvTranspose2d {
    pub fn new(w: Array4<f32>, b: Array1<f32>, stride: usize, pad: usize) -> Self {
        Self { w, b, stride, pad }
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    fn w2(&self) -> Array2<f32> {
        let (ic, oc, k, _) = self.w.dim();
        self.w.view().into_shape_with_order((ic, oc * k * k)).unwrap().to_owned()
    }

    pub fn forward(&self, x: &ArrayView4<f32>) -> Array4<f32> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &ArrayView4<f32>) -> (Array4<f32>, ConvTransposeCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv-transpose input channel mismatch");
        let (_, oc, k, _) = self.w.dim();
        let oh = ops::conv_transpose_out_dim(h, k, self.stride, self.pad);
        let ow = ops::conv_transpose_out_dim(w, k, self.stride, self.pad);
        let x2 = ops::nchw_to_c_nhw(x);
        let cols = ops::matmul(&self.w2().t(), &x2.view()); // (OC*k*k, N*H*W)
        let mut y = ops::col2im(&cols.view(), n, oc, oh, ow, k, self.stride, self.pad, h, w);
        for ni in 0..n {
            for ci in 0..oc {
                let bias = self.b[ci];
                y.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|v| v + bias);
            }
        }
        (y, ConvTransposeCache { x2, n, in_h: h, in_w: w })
    }

    /// Returns `(grad_input, grad_w, grad_b)`.
    pub fn backward(
        &self,
        cache: &ConvTransposeCache,
        gy: &ArrayView4<f32>,
    ) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
        let (ic, oc, k, _) = self.w.dim();
        let mut gb = Array1::<f32>::zeros(oc);
        for ni in 0..cache.n {
            for ci in 0..oc {
                gb[ci] += gy.slice(s![ni, ci, .., ..]).sum();
            }
        }
        // Gather of gy over the input grid is the adjoint of the forward scatter.
        let gcol = ops::im2col(gy, k, self.stride, self.pad, cache.in_h, cache.in_w);
        let gw2 = ops::matmul(&cache.x2.view(), &gcol.t()); // (IC, OC*k*k)
        let gweight = gw2.into_shape_with_order((ic, oc, k, k)).unwrap();
        let gx2 = ops::matmul(&self.w2().view(), &gcol.view()); // (IC, N*H*W)
        let gx = ops::c_nhw_to_nchw(&gx2.view(), cache.n, cache.in_h, cache.in_w);
        (gx, gweight, gb)
    }
}

/// ReLU; the returned tensor doubles as the backward mask.
pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(y: &Array4<f32>, gy: &Array4<f32>) -> Array4<f32> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn sigmoid(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(y: &Array4<f32>, gy: &Array4<f32>) -> Array4<f32> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, &v| *g *= v * (1.0 - v));
    gx
}

/// Max pooling, forward only (the teacher stem).
pub fn max_pool2d(x: &ArrayView4<f32>, k: usize, stride: usize, pad: usize) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let oh = ops::conv_out_dim(h, k, stride, pad);
    let ow = ops::conv_out_dim(w, k, stride, pad);
    let mut out = Array4::<f32>::from_elem((n, c, oh, ow), f32::NEG_INFINITY);
    for ni in 0..n {
        for ci in 0..c {
            for gi in 0..oh {
                for gj in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for kh in 0..k {
                        let ih = (gi * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (gj * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            m = m.max(x[(ni, ci, ih as usize, iw as usize)]);
                        }
                    }
                    out[(ni, ci, gi, gj)] = m;
                }
            }
        }
    }
    out
}
