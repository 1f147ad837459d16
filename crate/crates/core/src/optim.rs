//! Adam with decoupled weight decay, and the warmup + polynomial decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::Parameters;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of the run spent in linear warmup.
    pub warmup_fraction: f64,
    /// Exponent of the polynomial decay after warmup (1 = linear).
    pub decay_power: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 6e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.01,
            decay_power: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be finite and nonnegative, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(config_err!("eps must be positive and weight_decay nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || self.decay_power < 0.0 {
            return Err(config_err!("warmup_fraction must lie in [0, 1] and decay_power be nonnegative"));
        }
        Ok(())
    }

    /// Learning rate for `step` (0-based) of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let warmup = (self.warmup_fraction * total as f64).ceil() as usize;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = (total - warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        self.lr * (1.0 - progress).powf(self.decay_power)
    }
}

/// Norm gains, biases and the relative-position tables are not decayed.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") && !name.contains("norm")
}

pub struct Adam<F> {
    pub config: AdamConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new<P: Parameters<F>>(config: AdamConfig, params: &P) -> Result<Self> {
        config.validate()?;
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(Tensor::zeros(t.shape())));
        let v = m.clone();
        Ok(Adam { config, m, v, t: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. A zero rate leaves parameters
    /// bit-identical (moments still advance).
    pub fn step<P: Parameters<F>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let step_size = F::from_f64_lossy(lr / bc1);
        let inv_bc2 = F::from_f64_lossy(1.0 / bc2);
        let eps = F::from_f64_lossy(c.eps);
        let lr_f = F::from_f64_lossy(lr);
        let wd = F::from_f64_lossy(c.weight_decay);

        let mut gs: Vec<&Tensor<F>> = Vec::with_capacity(self.m.len());
        grads.visit("", &mut |_, g| gs.push(g));
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |name, p| {
            let g = gs[i].data();
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            let decay = lr > 0.0 && c.weight_decay > 0.0 && decays(&name);
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (F::one() - b1) * gj;
                *vj = b2 * *vj + (F::one() - b2) * gj * gj;
                if lr == 0.0 {
                    continue;
                }
                if decay {
                    *w -= lr_f * wd * *w;
                }
                *w -= step_size * *mj / ((*vj * inv_bc2).sqrt() + eps);
            }
            i += 1;
        });
    }
}
