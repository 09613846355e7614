//! Fully connected layer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::conv::LayerGrads;
use super::{init_uniform, ParamBundle, Scalar, SliceCursor};

/// `dot` inherits column-major layout from column-major operands (e.g. a
/// `concatenate` result fed through this layer), which would make later
/// `into_shape` calls reinterpret memory in the wrong order. Force row-major.
fn standardize<S: Scalar>(y: Array2<S>) -> Array2<S> {
    if y.is_standard_layout() {
        y
    } else {
        y.as_standard_layout().to_owned()
    }
}

/// `y = x W^T + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub w: Array2<S>,
    pub b: Array1<S>,
}

pub struct LinearCache<S> {
    x: Array2<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let bound = super::xavier_bound(in_dim, out_dim);
        let w = Array2::from_shape_vec((out_dim, in_dim), init_uniform(rng, out_dim * in_dim, bound))
            .unwrap();
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, LinearCache<S>) {
        let mut y = standardize(x.dot(&self.w.t()));
        y += &self.b;
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        grad_y: &Array2<S>,
        cache: &LinearCache<S>,
    ) -> (Array2<S>, LayerGrads<S>) {
        let grad_w = grad_y.t().dot(&cache.x);
        let grad_b = grad_y.sum_axis(Axis(0));
        let grad_x = standardize(grad_y.dot(&self.w));
        (
            grad_x,
            LayerGrads {
                w: grad_w.as_standard_layout().to_owned().into_raw_vec(),
                b: grad_b.into_raw_vec(),
            },
        )
    }
}

impl<S: Scalar> ParamBundle<S> for Linear<S> {
    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn append_params(&self, out: &mut Vec<S>) {
        out.extend(self.w.iter().copied());
        out.extend(self.b.iter().copied());
    }

    fn load_params(&mut self, src: &mut SliceCursor<'_, S>) {
        let w = src.take(self.w.len());
        self.w = Array2::from_shape_vec(self.w.dim(), w.to_vec()).unwrap();
        let b = src.take(self.b.len());
        self.b = Array1::from_vec(b.to_vec());
    }
}
