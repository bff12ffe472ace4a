//! Adaptive-moment optimizer with bias-corrected first and second moments.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Adam<S: Scalar> {
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
            m: vec![S::zero(); num_params],
            v: vec![S::zero(); num_params],
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = S::zero());
        self.v.iter_mut().for_each(|x| *x = S::zero());
        self.step = 0;
    }

    /// Applies one update to `params` in place. A zero learning rate leaves
    /// the parameters bit-identical while still advancing the moments.
    pub fn update(&mut self, params: &mut [S], grads: &[S], lr: S) {
        self.update_scaled(params, grads, S::one(), lr);
    }

    /// Same as [`Adam::update`] with every gradient entry multiplied by
    /// `scale` first.
    pub fn update_scaled(&mut self, params: &mut [S], grads: &[S], scale: S, lr: S) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let one = S::one();
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (c1, c2) = (one - b1, one - b2);
        let tiny = S::min_positive_value();
        let flush = |x: S| if x.abs() < tiny { S::zero() } else { x };
        if lr == S::zero() {
            for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
                let g = g * scale;
                *m = flush(b1 * *m + c1 * g);
                *v = flush(b2 * *v + c2 * g * g);
            }
            return;
        }
        let step_size = lr / (one - b1.powi(t));
        let inv_bc2 = one / (one - b2.powi(t));
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, (m, v)), &g) in params.iter_mut().zip(moments).zip(grads) {
            let g = g * scale;
            *m = flush(b1 * *m + c1 * g);
            *v = flush(b2 * *v + c2 * g * g);
            *p = *p - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (up to eps).
        let mut opt = Adam::<f64>::new(2);
        let mut p = vec![1.0, 1.0];
        opt.update(&mut p, &[0.5, -3.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::<f32>::new(1);
        let mut p = vec![5.0f32];
        for _ in 0..3000 {
            let g = [2.0 * (p[0] - 2.0)];
            opt.update(&mut p, &g, 0.05);
        }
        assert!((p[0] - 2.0).abs() < 1e-2);
    }
}
