//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

/// Learning rate with linear warmup, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub warmup_steps: u64,
}

impl Schedule {
    /// Rate for the 1-based optimizer step `step`.
    pub fn at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

impl<R: Real> AdamW<R> {
    pub fn new(store: &ParamStore<R>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<R>> = (0..store.len()).map(|i| Tensor::zeros(store.value(i).shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn cast<S: Real>(&self) -> AdamW<S> {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            step: self.step,
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Updates every parameter for which `trainable(name)` holds, using the
    /// gradients accumulated in `store`. Weight decay applies to matrices only.
    pub fn update(&mut self, store: &mut ParamStore<R>, lr: f64, trainable: impl Fn(&str) -> bool) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        for i in 0..store.len() {
            if !trainable(store.name(i)) {
                continue;
            }
            let decay = if store.value(i).shape().len() >= 2 {
                R::lit(1.0 - lr * self.weight_decay)
            } else {
                R::one()
            };
            let grad = store.grad_at(i).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_mut(i).data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (R::one() - b1) * g;
                v[j] = b2 * v[j] + (R::one() - b2) * g * g;
                let mh = m[j].as_f64() / c1;
                let vh = v[j].as_f64() / c2;
                w[j] = w[j] * decay - R::lit(lr * mh / (vh.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Rescales accumulated gradients to global norm at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<R: Real>(store: &mut ParamStore<R>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for i in 0..store.len() {
        sq += store.grad_at(i).data().iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = R::lit(max_norm / norm);
        for i in 0..store.len() {
            for g in store.grad_mut(i).data_mut() {
                *g = *g * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let s = Schedule {
            lr: 1.0,
            warmup_steps: 4,
        };
        assert_eq!([s.at(1), s.at(2), s.at(4), s.at(100)], [0.25, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(&[2, 1], &[1.0, -1.0]).unwrap()).unwrap();
        store.accumulate(0, &Tensor::from_f64(&[2, 1], &[3.0, -0.5]).unwrap()).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        opt.update(&mut store, 0.1, |_| true).unwrap();
        let w = store.value(0).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(&[3], &[4.0, -2.0, 1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            store.zero_grad();
            let g = store.value(0).clone();
            store.accumulate(0, &g).unwrap();
            opt.update(&mut store, 0.01, |_| true).unwrap();
        }
        assert!(store.value(0).data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn frozen_names_are_untouched_and_clip_bounds_norm() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
        store.insert("b", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
        store.accumulate(0, &Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
        store.accumulate(1, &Tensor::from_f64(&[1], &[4.0]).unwrap()).unwrap();
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert!((store.grad_at(1).data()[0] - 0.8).abs() < 1e-12);
        let mut opt = AdamW::new(&store, 0.1);
        opt.update(&mut store, 0.1, |n| n == "a").unwrap();
        assert_eq!(store.value(1).data()[0], 1.0);
        assert_ne!(store.value(0).data()[0], 1.0);
    }
}
