//! Minimal neural-network kernel: batched conv / transposed-conv / linear
//! layers with hand-written backward passes, Adam, and deterministic
//! chunked batch parallelism.
//!
//! Everything is generic over [`Scalar`] so training runs in `f32` while
//! gradient checks run the identical code path in `f64`.

pub mod adam;
pub mod conv;
pub mod linear;
pub mod par;

use ndarray::NdFloat;
use rand::Rng;

pub use adam::Adam;
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;

/// Element type for all network math.
pub trait Scalar: NdFloat + num_traits::Float + std::iter::Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
}

/// Flat parameter access shared by every layer and module.
///
/// Parameters are always visited in a fixed canonical order, so flat
/// vectors produced by [`ParamBundle::flat_params`] line up with gradient
/// vectors produced by the backward passes.
pub trait ParamBundle<S: Scalar> {
    fn param_count(&self) -> usize;
    /// Append all parameters to `out` in canonical order.
    fn append_params(&self, out: &mut Vec<S>);
    /// Overwrite all parameters from `src`, advancing the cursor.
    fn load_params(&mut self, src: &mut SliceCursor<'_, S>);

    fn flat_params(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.param_count());
        self.append_params(&mut v);
        v
    }

    fn set_flat_params(&mut self, params: &[S]) {
        let mut cur = SliceCursor::new(params);
        self.load_params(&mut cur);
        assert!(cur.is_empty(), "parameter vector longer than bundle");
    }
}

/// Read cursor over a flat parameter slice.
pub struct SliceCursor<'a, S> {
    data: &'a [S],
}

impl<'a, S: Copy> SliceCursor<'a, S> {
    pub fn new(data: &'a [S]) -> Self {
        Self { data }
    }

    pub fn take(&mut self, n: usize) -> &'a [S] {
        let (head, tail) = self.data.split_at(n);
        self.data = tail;
        head
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Xavier-uniform initialization bound for a layer with the given fan-in
/// and fan-out; suited to the tanh nonlinearities used throughout.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_uniform<S: Scalar, R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

/// Elementwise tanh with cache for the backward pass.
pub fn tanh_forward<S: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    x.mapv(|v| v.tanh())
}

/// d/dx tanh(x) expressed through the forward output y = tanh(x).
pub fn tanh_backward<S: Scalar, D: ndarray::Dimension>(
    grad_y: &ndarray::Array<S, D>,
    y: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    let mut g = grad_y.clone();
    g.zip_mut_with(y, |gv, &yv| *gv *= S::one() - yv * yv);
    g
}

pub fn sigmoid<S: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    x.mapv(|v| S::one() / (S::one() + (-v).exp()))
}
