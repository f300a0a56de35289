//! Adam with bias correction.

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every non-frozen parameter from its current `grad`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one = T::one();
        let c1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.frozen {
                continue;
            }
            let g = p.grad.data();
            for (((theta, mi), vi), &gi) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::scalar(theta)).unwrap();
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = scalar_store(0.0);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(0.5);
        let mut adam = AdamState::new(&s, 0.001);
        adam.step(&mut s);
        assert_eq!(adam.t, 1);
        let theta = s.iter().next().unwrap().value.data()[0];
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((theta - expected).abs() < 1e-15);
        assert!((adam.m[0].data()[0] - 0.05).abs() < 1e-15);
        assert!((adam.v[0].data()[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = scalar_store(1.25);
        let mut adam = AdamState::new(&s, 0.001);
        for _ in 0..3 {
            adam.step(&mut s);
        }
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.25);
        assert_eq!(adam.m[0].data()[0], 0.0);
        assert_eq!(adam.v[0].data()[0], 0.0);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        // Hand-rolled scalar Adam.
        let (lr, b1, b2, eps, g) = (0.001f64, 0.9f64, 0.999f64, 1e-8f64, 0.3f64);
        let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }

        let mut s = scalar_store(0.7);
        let mut adam = AdamState::new(&s, lr);
        for _ in 0..2 {
            s.iter_mut().next().unwrap().grad = Tensor::scalar(g);
            adam.step(&mut s);
        }
        assert!((s.iter().next().unwrap().value.data()[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = scalar_store(2.0);
        s.set_frozen("theta", true);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
        let mut adam = AdamState::new(&s, 0.1);
        adam.step(&mut s);
        assert_eq!(s.iter().next().unwrap().value.data()[0], 2.0);
    }
}
