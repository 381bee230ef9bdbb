//! SGD with momentum and Adam. Parameters without a gradient in the current
//! step are skipped, so unsampled supernet operators stay untouched.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v <- momentum * v + g`, then `p <- p - lr * v - lr * wd * p`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        for (p, slot) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(g) = p.grad() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sgd gradient".into()));
            }
            let g = g.to_vec();
            let v = slot.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vv = mu * *vv + *gv;
                *pv = *pv - lr * *vv - lr * wd * *pv;
            }
        }
        Ok(())
    }
}

/// Adam state, exposed for checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub slots: Vec<Option<AdamSlot<T>>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_params(lr, (0.9, 0.999), 1e-8, 0.0)
    }

    pub fn with_params(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            slots: Vec::new(),
        }
    }

    /// Bias-corrected Adam update. A non-finite gradient rejects the whole
    /// step before any parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("adam gradient".into()));
                }
            }
        }
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        for (p, slot) in params.iter_mut().zip(self.slots.iter_mut()) {
            let Some(g) = p.grad() else { continue };
            let g: Vec<f64> = g.iter().map(|v| v.f64()).collect();
            let s = slot.get_or_insert_with(|| AdamSlot {
                step: 0,
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
            });
            s.step += 1;
            let bc1 = 1.0 - self.beta1.powi(s.step as i32);
            let bc2 = 1.0 - self.beta2.powi(s.step as i32);
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] + self.weight_decay * pv.f64();
                let m = self.beta1 * s.m[i].f64() + (1.0 - self.beta1) * gi;
                let v = self.beta2 * s.v[i].f64() + (1.0 - self.beta2) * gi * gi;
                s.m[i] = T::of(m);
                s.v[i] = T::of(v);
                let update = self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                *pv = T::of(pv.f64() - update);
            }
        }
        Ok(())
    }
}

/// Clears the gradient slot of every parameter.
pub fn zero_grads<T: Element>(params: &mut [&mut Tensor<T>]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f64], grad: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::new(&[vals.len()], vals.to_vec()).unwrap();
        t.accumulate_grad(grad);
        t
    }

    #[test]
    fn plain_sgd_is_lr_times_grad() {
        let mut p = param(&[1.0, -2.0], &[0.5, 4.0]);
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.4]);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        Sgd::new(0.1, 0.9, 0.0).step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        let mut q = param(&[1.0, -2.0], &[0.0, 0.0]);
        Adam::new(0.1).step(&mut [&mut q]).unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
    }

    #[test]
    fn momentum_matches_hand_recurrence() {
        let (lr, mu) = (0.1, 0.9);
        let mut p = param(&[1.0], &[2.0]);
        let mut opt = Sgd::new(lr, mu, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        p.zero_grad();
        p.accumulate_grad(&[-1.0]);
        opt.step(&mut [&mut p]).unwrap();
        let v1 = 2.0;
        let v2 = mu * v1 - 1.0;
        let expect = 1.0 - lr * v1 - lr * v2;
        assert!((p.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn skips_parameters_without_gradient() {
        let mut a = param(&[1.0], &[1.0]);
        let mut b = Tensor::new(&[1], vec![3.0]).unwrap();
        Sgd::new(0.5, 0.9, 0.1).step(&mut [&mut a, &mut b]).unwrap();
        assert_eq!(b.data(), &[3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.7, -5.0, 123.0] {
            let mut p = param(&[0.25], &[g]);
            let mut opt = Adam::with_params(0.01, (0.9, 0.999), 1e-12, 0.0);
            opt.step(&mut [&mut p]).unwrap();
            assert!(((p.data()[0] - 0.25).abs() - 0.01).abs() <= 1e-6, "g={g}");
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = param(&[1.0, 2.0], &[0.1, f64::NAN]);
        let mut opt = Adam::new(0.1);
        assert!(opt.step(&mut [&mut p]).is_err());
        assert_eq!(p.data(), &[1.0, 2.0]);
    }
}
