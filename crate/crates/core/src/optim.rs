//! Adam with linear warmup and inverse-square-root decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Multiplier on `H^-0.5 · min(s^-0.5, s · warmup^-1.5)`.
    pub lr_scale: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_scale: 0.5,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.lr_scale > 0.0) || !(self.eps > 0.0) || self.clip_norm < 0.0 {
            return Err(Error::config("lr_scale and eps must be positive, clip_norm non-negative"));
        }
        Ok(())
    }

    /// Learning rate for 1-based update `step`.
    pub fn lr(&self, hidden: usize, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.lr_scale * (hidden as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: OptimConfig,
    /// Updates applied so far.
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: OptimConfig, params: &ModelParams<T>) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; returns the learning rate used.
    pub fn update(&mut self, params: &mut ModelParams<T>, hidden: usize, grads: &[Option<Tensor<T>>]) -> Result<f64> {
        if grads.len() != params.tensors.len() {
            return Err(Error::contract("one gradient slot per parameter expected"));
        }
        let c = &self.config;
        let mut factor = 1.0;
        if c.clip_norm > 0.0 {
            let sq: f64 = grads
                .iter()
                .flatten()
                .map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > c.clip_norm {
                factor = c.clip_norm / norm;
            }
        }
        self.step += 1;
        let lr = c.lr(hidden, self.step);
        let t = self.step as i32;
        let step_size = lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps, f, ss) = (T::one(), T::of(c.eps), T::of(factor), T::of(step_size));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.tensors[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * f;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                p[j] -= ss * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(lr)
    }

    pub fn write_state(&self, names: &[String], ck: &mut Checkpoint) {
        ck.push("adam.step", &Tensor::<f64>::scalar(self.step as f64));
        for (i, n) in names.iter().enumerate() {
            ck.push(format!("adam.m.{n}"), &self.m[i]);
            ck.push(format!("adam.v.{n}"), &self.v[i]);
        }
    }

    pub fn read_state(config: OptimConfig, params: &ModelParams<T>, ck: &Checkpoint) -> Result<Self> {
        let mut a = Self::new(config, params);
        a.step = ck.require::<f64>("adam.step")?.item() as u64;
        for (i, n) in params.names.iter().enumerate() {
            a.m[i] = ck.require(&format!("adam.m.{n}"))?;
            a.v[i] = ck.require(&format!("adam.v.{n}"))?;
        }
        Ok(a)
    }
}
