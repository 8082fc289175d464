//! Adam with bias correction and cosine learning-rate decay.

use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW form): `p -= lr * wd * p` each step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment buffers for the trainable parameters of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter, then clears all gradients.
    ///
    /// Every trainable parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.update(store, lr);
        Ok(())
    }

    /// Like [`AdamState::step`], but trainable parameters without a gradient
    /// (unused by the loss) keep their value and moments.
    pub fn step_available(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.update(store, lr);
    }

    fn update(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let cfg = self.config;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bias1 = T::lit(1.0 - num_traits::Float::powi(cfg.beta1, self.step as i32));
        let bias2 = T::lit(1.0 - num_traits::Float::powi(cfg.beta2, self.step as i32));
        let (lr_t, eps, decay) = (T::lit(lr), T::lit(cfg.eps), T::lit(lr * cfg.weight_decay));
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (param, slot) in store.params_mut().iter_mut().zip(self.moments.iter_mut()) {
            let Some(grad) = param.grad.take().filter(|_| param.trainable) else { continue };
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let value = alloc::rc::Rc::make_mut(&mut param.value);
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                if cfg.weight_decay != 0.0 {
                    *p -= decay * *p;
                }
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
    }
}

/// `min + (base - min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + num_traits::Float::cos(core::f64::consts::PI * t))
}
