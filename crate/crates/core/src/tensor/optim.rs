//! Adam with bias correction, and cosine annealing of the learning rate.

use std::f64::consts::PI;

use super::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One update of every parameter. Moments are kept in `f64` arithmetic
    /// per element and rounded into `T` storage.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gi = gi.to_f64().unwrap();
                let mn = BETA1 * mi.to_f64().unwrap() + (1.0 - BETA1) * gi;
                let vn = BETA2 * vi.to_f64().unwrap() + (1.0 - BETA2) * gi * gi;
                *mi = T::c(mn);
                *vi = T::c(vn);
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + EPSILON);
                *pi = T::c(pi.to_f64().unwrap() - update);
            }
        }
    }
}

/// `lr_min + (lr0 - lr_min)(1 + cos(π·epoch/total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    assert!(total_epochs > 0 && epoch <= total_epochs, "epoch {epoch} of {total_epochs}");
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_vec(&[3], vec![1.0f64, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            st.step(&mut p, &[Tensor::zeros(&[3])], 1e-3);
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε)
        for g in [0.3f64, -2.0, 1e-3] {
            let mut p = vec![Tensor::scalar(1.0f64)];
            let mut st = AdamState::new(&p);
            st.step(&mut p, &[Tensor::scalar(g)], 1e-4);
            let expected = 1.0 - 1e-4 * g / (g.abs() + EPSILON);
            assert!((p[0].item() - expected).abs() < 1e-15);
            assert!((p[0].item() - (1.0 - 1e-4 * g.signum())).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_independent_scalar_adam_on_quadratic() {
        // minimize (x - 3)^2
        let (lr, mut x_ref, mut m, mut v) = (0.05f64, -1.0f64, 0.0f64, 0.0f64);
        let mut p = vec![Tensor::scalar(-1.0f64)];
        let mut st = AdamState::new(&p);
        for t in 1..=100 {
            let g_ref = 2.0 * (x_ref - 3.0);
            m = 0.9 * m + 0.1 * g_ref;
            v = 0.999 * v + 0.001 * g_ref * g_ref;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x_ref -= lr * mh / (vh.sqrt() + 1e-8);

            let g = 2.0 * (p[0].item() - 3.0);
            st.step(&mut p, &[Tensor::scalar(g)], lr);
            assert!((p[0].item() - x_ref).abs() < 1e-10, "step {t}");
        }
    }

    #[test]
    fn cosine_schedule_landmarks() {
        assert_eq!(cosine_lr(0, 40, 1e-4, 0.0), 1e-4);
        assert!(cosine_lr(40, 40, 1e-4, 0.0).abs() < 1e-20);
        assert!((cosine_lr(20, 40, 1e-4, 2e-5) - 6e-5).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=40).map(|e| cosine_lr(e, 40, 1e-4, 0.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
