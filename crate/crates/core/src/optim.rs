//! Adam with L2 weight decay over [`Param`]s.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math::sqrtf;
use crate::nn::Param;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Moment buffers are matched to parameters by visiting order, which is
/// fixed for a given model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Starts a new update; call [`Self::update`] once per trainable
    /// parameter, in the same order every step.
    pub fn begin_step(&mut self) -> AdamStep<'_> {
        self.step += 1;
        AdamStep { adam: self, index: 0 }
    }
}

pub struct AdamStep<'a> {
    adam: &'a mut Adam,
    index: usize,
}

impl AdamStep<'_> {
    pub fn update(&mut self, param: &mut Param, lr: f32) -> Result<()> {
        if !param.trainable {
            return Ok(());
        }
        let a = &mut *self.adam;
        let i = self.index;
        self.index += 1;
        if i == a.first.len() {
            a.first.push(alloc::vec![0.0; param.len()]);
            a.second.push(alloc::vec![0.0; param.len()]);
        }
        if a.first[i].len() != param.len() {
            bail!(
                Shape,
                "optimizer state for `{}` has {} entries, param has {}",
                param.name,
                a.first[i].len(),
                param.len()
            );
        }
        let c = &a.config;
        let t = a.step as i32;
        let bc1 = 1.0 - libm::powf(c.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(c.beta2, t as f32);
        let (m, v) = (&mut a.first[i], &mut a.second[i]);
        for j in 0..param.value.len() {
            let g = param.grad[j] + c.weight_decay * param.value[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            param.value[j] -= lr * mh / (sqrtf(vh) + c.eps);
        }
        Ok(())
    }
}
