//! Adam with decoupled weight decay, and the warmup + cosine schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Biases and LayerNorm affines are never decayed.
pub fn decay_excluded(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// Per-parameter moments plus the step counter. Parameters outside the
/// trainable set are never read or written.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    trainable: Vec<bool>,
    decay: Vec<bool>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig, trainable: impl Fn(&str) -> bool) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
            trainable: store.iter().map(|(n, _)| trainable(n)).collect(),
            decay: store.iter().map(|(n, _)| !decay_excluded(n)).collect(),
        }
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn is_decayed(&self, index: usize) -> bool {
        self.decay[index]
    }

    /// One bias-corrected update at learning rate `lr`; `grads` is in
    /// store registration order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::dim("adam step", &[grads.len()], &[self.m.len()]));
        }
        for (i, (id, g)) in store.ids().zip(grads).enumerate() {
            if self.trainable[i] && !g.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of {}", store.name(id)),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                let g = g.f64();
                let mn = c.beta1 * m.f64() + (1.0 - c.beta1) * g;
                let vn = c.beta2 * v.f64() + (1.0 - c.beta2) * g * g;
                *m = T::of(mn);
                *v = T::of(vn);
                let mh = mn / bc1;
                let vh = vn / bc2;
                let pf = p.f64();
                *p = T::of(pf - lr * (mh / (vh.sqrt() + c.eps)) - lr * wd * pf);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0, then cosine decay to `base_lr / 100` at the
/// last step (`total_steps - 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let min = self.base_lr / 100.0;
        let span = self.total_steps.saturating_sub(1).saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        min + (self.base_lr - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
