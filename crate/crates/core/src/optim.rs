//! AdamW with decoupled weight decay and the warmup + polynomial schedule.

use alloc::vec::Vec;

use crate::autodiff::ParamStore;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Tensor2D, Tensor2D)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter; a missing gradient counts as
    /// zero. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(invalid("adamw_step", "learning rate must be finite and non-negative"));
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, f64::from(t));
        let bc2 = 1.0 - libm::pow(c.beta2, f64::from(t));
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for id in store.trainable_ids() {
            let grad = match store.grad(id) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = store.value(id).shape();
                    Tensor2D::zeros(r, c)
                }
            };
            let value = store.value_mut(id);
            if grad.shape() != value.shape() {
                return Err(shape_err("adamw_step", "gradient and parameter shapes differ"));
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor2D::zeros(grad.rows(), grad.cols()), Tensor2D::zeros(grad.rows(), grad.cols())));
            if m.shape() != grad.shape() {
                return Err(shape_err("adamw_step", "optimizer state shape differs from parameter"));
            }
            let decay = 1.0 - lr * c.weight_decay;
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (libm::sqrt(v_hat) + c.eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub poly_power: f64,
}

/// `lr·warmup_factor` during warmup, then `lr·(1 − progress)^power` where
/// progress runs over the post-warmup epochs.
pub fn poly_lr(epoch: usize, step_frac: f64, s: &Schedule) -> f64 {
    if epoch < s.warmup_epochs {
        return s.lr * s.warmup_factor;
    }
    let span = s.epochs.saturating_sub(s.warmup_epochs).max(1) as f64;
    let progress = ((epoch - s.warmup_epochs) as f64 + step_frac.clamp(0.0, 1.0)) / span;
    s.lr * libm::pow((1.0 - progress).max(0.0), s.poly_power)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule {
            lr: 1e-3,
            epochs: 30,
            warmup_epochs: 5,
            warmup_factor: 0.1,
            poly_power: 0.9,
        }
    }

    #[test]
    fn warmup_and_decay() {
        let s = sched();
        assert!((poly_lr(0, 0.0, &s) - 1e-4).abs() < 1e-18);
        assert_eq!(poly_lr(5, 0.0, &s), 1e-3);
        let half = poly_lr(5, 0.0, &Schedule { epochs: 7, ..s });
        assert_eq!(half, 1e-3);
        let mid = poly_lr(6, 0.0, &Schedule { epochs: 7, ..s });
        assert!((mid - 1e-3 * libm::pow(0.5, 0.9)).abs() < 1e-15);
        assert!((mid / 1e-3 - 0.536).abs() < 1e-3);
        assert!(poly_lr(29, 0.999_999, &s) < 1e-8);
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor2D::row_vector(&[1.0, -2.0]), true);
        store.zero_grad();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor2D::row_vector(&[1.0, -2.0]), true);
        store.zero_grad();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() });
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[0.95, -1.9]);
    }

    #[test]
    fn frozen_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor2D::row_vector(&[1.0]), false);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[1.0]);
    }

    #[test]
    fn scalar_quadratic_converges() {
        // Minimizes (x - 1)² from x = 0 and replays the same update by hand.
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor2D::scalar(0.0), true);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for step in 1..=200 {
            let mut t = crate::autodiff::Tape::new();
            let xv = t.param(&store, id).unwrap();
            let c = t.constant(Tensor2D::scalar(1.0)).unwrap();
            let loss = t.mse(xv, c).unwrap();
            store.zero_grad();
            t.backward(loss, &mut store).unwrap();
            opt.step(&mut store, 1e-2).unwrap();

            let g = 2.0 * (x - 1.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - libm::pow(0.9, step as f64));
            let v_hat = v / (1.0 - libm::pow(0.999, step as f64));
            x -= 1e-2 * m_hat / (libm::sqrt(v_hat) + 1e-8);
            assert!((store.value(id).item().unwrap() - x).abs() < 1e-12);
        }
        assert!((x - 1.0).abs() < 0.05, "x = {x}");
    }
}
