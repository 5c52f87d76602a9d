//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};

/// Which parameter groups an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub head: bool,
    pub decoder: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        head: true,
        decoder: true,
    };

    pub fn allows(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Head => self.head,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig, num_params: usize) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One update. Frozen groups keep their values and moments unchanged.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &[f64],
        lr: f64,
        trainable: Trainable,
    ) {
        debug_assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let specs = params.specs().to_vec();
        let values = params.values_mut();
        for spec in &specs {
            if !trainable.allows(spec.group) {
                continue;
            }
            let decay = if spec.decay { self.weight_decay } else { 0.0 };
            for i in spec.offset..spec.offset + spec.len() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                values[i] -= lr * decay * values[i];
                values[i] -= lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(|g| g * g).sum::<f64>());
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Main,
}

/// Linear warmup from 0 to `lr_init`, then cosine decay to `lr_final` over
/// the remaining steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_epochs: u64,
    /// Total epochs including warmup.
    pub total_epochs: u64,
    pub steps_per_epoch: u64,
    pub lr_init: f64,
    pub lr_final: f64,
}

impl Schedule {
    pub fn warmup_steps(&self) -> u64 {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn phase(&self, step: u64) -> Phase {
        if step < self.warmup_steps() {
            Phase::Warmup
        } else {
            Phase::Main
        }
    }

    /// Learning rate at `step`.
    ///
    /// Warmup: `lr_init * step / warmup_steps`. Main phase, with progress
    /// `q` running from 0 (first main step) to 1 (last step):
    /// `w = (1 + cos(pi q)) / 2` and `lr = w * lr_init + (1 - w) * lr_final`,
    /// which hits both endpoints exactly. A single-step main phase uses
    /// `lr_init`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let total = self.total_steps();
        if step >= total {
            return Err(Error::Schedule { step, total });
        }
        let warm = self.warmup_steps();
        if step < warm {
            return Ok(self.lr_init * step as f64 / warm as f64);
        }
        let main = total - warm;
        if main <= 1 {
            return Ok(self.lr_init);
        }
        let q = (step - warm) as f64 / (main - 1) as f64;
        let w = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * q));
        Ok(w * self.lr_init + (1.0 - w) * self.lr_final)
    }
}
