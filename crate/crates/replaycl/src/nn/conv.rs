//! Batched 2-D convolution and transposed convolution via im2col + GEMM.

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};
use rand::Rng;

use super::{init_uniform, ParamBundle, Scalar, SliceCursor};

/// Lower a batch of images `(N, C, H, W)` into a column matrix
/// `(N*oh*ow, C*k*k)` for a convolution with the given geometry.
pub fn im2col<S: Scalar>(
    x: &ArrayView4<'_, S>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let mut cols = Array2::<S>::zeros((n * oh * ow, c * k * k));
    for bi in 0..n {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = bi * oh * ow + oy * ow + ox;
                let mut row_view = cols.row_mut(row);
                let row_slice = row_view.as_slice_mut().unwrap();
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row_slice[ci * k * k + ky * k + kx] =
                                x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into image space.
#[allow(clippy::too_many_arguments)]
pub fn col2im<S: Scalar>(
    cols: &Array2<S>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<S> {
    let mut x = Array4::<S>::zeros((n, c, h, w));
    for bi in 0..n {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = cols.row(bi * oh * ow + oy * ow + ox);
                let row_slice = row.as_slice().unwrap();
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[bi, ci, iy as usize, ix as usize]] +=
                                row_slice[ci * k * k + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Strided convolution layer. Weights are `(out_c, in_c, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub w: Array4<S>,
    pub b: Array1<S>,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<S> {
    cols: Array2<S>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

#[derive(Debug)]
pub struct LayerGrads<S> {
    pub w: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = in_c * k * k;
        let fan_out = out_c * k * k;
        let bound = super::xavier_bound(fan_in, fan_out);
        let w = Array4::from_shape_vec(
            (out_c, in_c, k, k),
            init_uniform(rng, out_c * in_c * k * k, bound),
        )
        .unwrap();
        Self {
            w,
            b: Array1::zeros(out_c),
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.k, self.stride, self.pad),
            conv_out_size(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &ArrayView4<'_, S>) -> (Array4<S>, Conv2dCache<S>) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let out_c = self.w.dim().0;
        let cols = im2col(x, self.k, self.stride, self.pad, oh, ow);
        let w2 = self
            .w
            .view()
            .into_shape((out_c, c * self.k * self.k))
            .unwrap();
        let mut y2 = cols.dot(&w2.t());
        y2 += &self.b;
        let y = y2
            .into_shape((n, oh, ow, out_c))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (
            y,
            Conv2dCache {
                cols,
                in_dim: (n, c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Returns the gradient wrt the input plus this layer's parameter grads.
    pub fn backward(
        &self,
        grad_y: &Array4<S>,
        cache: &Conv2dCache<S>,
    ) -> (Array4<S>, LayerGrads<S>) {
        let (n, c, h, w) = cache.in_dim;
        let (oh, ow) = cache.out_hw;
        let out_c = self.w.dim().0;
        let gy2 = grad_y
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape((n * oh * ow, out_c))
            .unwrap();
        let grad_w = gy2.t().dot(&cache.cols);
        let grad_b = gy2.sum_axis(Axis(0));
        let w2 = self
            .w
            .view()
            .into_shape((out_c, c * self.k * self.k))
            .unwrap();
        let grad_cols = gy2.dot(&w2);
        let grad_x = col2im(&grad_cols, n, c, h, w, self.k, self.stride, self.pad, oh, ow);
        (
            grad_x,
            LayerGrads {
                w: grad_w.as_standard_layout().to_owned().into_raw_vec(),
                b: grad_b.into_raw_vec(),
            },
        )
    }
}

impl<S: Scalar> ParamBundle<S> for Conv2d<S> {
    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn append_params(&self, out: &mut Vec<S>) {
        out.extend(self.w.iter().copied());
        out.extend(self.b.iter().copied());
    }

    fn load_params(&mut self, src: &mut SliceCursor<'_, S>) {
        let w = src.take(self.w.len());
        self.w = Array4::from_shape_vec(self.w.dim(), w.to_vec()).unwrap();
        let b = src.take(self.b.len());
        self.b = Array1::from_vec(b.to_vec());
    }
}

/// Transposed convolution. Weights are `(in_c, out_c, k, k)`; the output
/// spatial size is pinned at construction so stacks can mirror an encoder
/// trace exactly (28 -> 14 -> 7 -> 3 -> 1 and back).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<S> {
    pub w: Array4<S>,
    pub b: Array1<S>,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_hw: (usize, usize),
}

pub struct ConvT2dCache<S> {
    x2: Array2<S>,
    in_dim: (usize, usize, usize, usize),
}

impl<S: Scalar> ConvTranspose2d<S> {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Self {
        let fan_in = in_c * k * k;
        let fan_out = out_c * k * k;
        let bound = super::xavier_bound(fan_in, fan_out);
        let w = Array4::from_shape_vec(
            (in_c, out_c, k, k),
            init_uniform(rng, in_c * out_c * k * k, bound),
        )
        .unwrap();
        Self {
            w,
            b: Array1::zeros(out_c),
            k,
            stride,
            pad,
            out_hw,
        }
    }

    pub fn forward(&self, x: &ArrayView4<'_, S>) -> (Array4<S>, ConvT2dCache<S>) {
        let (n, in_c, ih, iw) = x.dim();
        let (oh, ow) = self.out_hw;
        debug_assert_eq!(conv_out_size(oh, self.k, self.stride, self.pad), ih);
        debug_assert_eq!(conv_out_size(ow, self.k, self.stride, self.pad), iw);
        let out_c = self.w.dim().1;
        let x2 = x
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape((n * ih * iw, in_c))
            .unwrap();
        let w2 = self
            .w
            .view()
            .into_shape((in_c, out_c * self.k * self.k))
            .unwrap();
        let cols = x2.dot(&w2);
        let mut y = col2im(
            &cols, n, out_c, oh, ow, self.k, self.stride, self.pad, ih, iw,
        );
        for mut img in y.axis_iter_mut(Axis(0)) {
            for (ci, mut ch) in img.axis_iter_mut(Axis(0)).enumerate() {
                ch += self.b[ci];
            }
        }
        (
            y,
            ConvT2dCache {
                x2,
                in_dim: (n, in_c, ih, iw),
            },
        )
    }

    pub fn backward(
        &self,
        grad_y: &Array4<S>,
        cache: &ConvT2dCache<S>,
    ) -> (Array4<S>, LayerGrads<S>) {
        let (n, in_c, ih, iw) = cache.in_dim;
        let (oh, ow) = self.out_hw;
        let out_c = self.w.dim().1;
        let grad_cols = im2col(&grad_y.view(), self.k, self.stride, self.pad, ih, iw);
        let w2 = self
            .w
            .view()
            .into_shape((in_c, out_c * self.k * self.k))
            .unwrap();
        let grad_x2 = grad_cols.dot(&w2.t());
        let grad_w = cache.x2.t().dot(&grad_cols);
        let grad_b = grad_y
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .sum_axis(Axis(0));
        let grad_x = grad_x2
            .into_shape((n, ih, iw, in_c))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        let _ = (oh, ow);
        (
            grad_x,
            LayerGrads {
                w: grad_w.as_standard_layout().to_owned().into_raw_vec(),
                b: grad_b.into_raw_vec(),
            },
        )
    }
}

impl<S: Scalar> ParamBundle<S> for ConvTranspose2d<S> {
    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn append_params(&self, out: &mut Vec<S>) {
        out.extend(self.w.iter().copied());
        out.extend(self.b.iter().copied());
    }

    fn load_params(&mut self, src: &mut SliceCursor<'_, S>) {
        let w = src.take(self.w.len());
        self.w = Array4::from_shape_vec(self.w.dim(), w.to_vec()).unwrap();
        let b = src.take(self.b.len());
        self.b = Array1::from_vec(b.to_vec());
    }
}
