//! Adaptive moment estimation over a flat parameter vector.

use super::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
            t: 0,
        }
    }

    pub fn n_params(&self) -> usize {
        self.m.len()
    }

    /// One update step in place. `params` and `grads` must both match the
    /// length given at construction.
    pub fn step(&mut self, params: &mut [S], grads: &[S]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
