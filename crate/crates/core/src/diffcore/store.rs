use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::BnRunningUpdate;
use super::tensor::Tensor;
use super::BN_MOMENTUM;
use crate::error::{invalid, Result};

/// Half-width of the uniform initialisation interval.
pub const INIT_BOUND: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }
}

/// Named trainable parameters plus non-trainable buffers, both kept in
/// name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    buffers: BTreeMap<String, Tensor>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_unused(&self, name: &str) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            invalid!("name `{name}` already registered");
        }
        Ok(())
    }

    /// Registers `name` with values drawn uniformly from
    /// `[-INIT_BOUND, INIT_BOUND]`.
    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, seed: u64) -> Result<&Tensor> {
        self.init_uniform_bounded(name, shape, INIT_BOUND, seed)
    }

    /// Uniform initialisation on `[-bound, bound]`. The generator is seeded
    /// from `seed` and the parameter name, so each tensor's values do not
    /// depend on registration order.
    pub fn init_uniform_bounded(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        bound: f64,
        seed: u64,
    ) -> Result<&Tensor> {
        self.check_unused(name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn init_constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<&Tensor> {
        self.check_unused(name)?;
        self.insert(name, Tensor::filled(shape, value))
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<&Tensor> {
        self.check_unused(name)?;
        let p = self
            .params
            .entry(name.to_string())
            .or_insert(Parameter::new(value));
        Ok(&p.value)
    }

    pub fn insert_parameter(&mut self, name: &str, param: Parameter) -> Result<()> {
        self.check_unused(name)?;
        let n = param.value.len();
        if param.grad.len() != n || param.first_moment.len() != n || param.second_moment.len() != n {
            invalid!("parameter `{name}` has inconsistent state lengths");
        }
        self.params.insert(name.to_string(), param);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.check_unused(name)?;
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        match self.params.get(name) {
            Some(p) => Ok(&p.value),
            None => invalid!("unknown parameter `{name}`"),
        }
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.params.get_mut(name) {
            Some(p) => Ok(&mut p.value),
            None => invalid!("unknown parameter `{name}`"),
        }
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        match self.buffers.get(name) {
            Some(b) => Ok(b),
            None => invalid!("unknown buffer `{name}`"),
        }
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.buffers.get_mut(name) {
            Some(b) => Ok(b),
            None => invalid!("unknown buffer `{name}`"),
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let Some(p) = self.params.get_mut(name) else {
            invalid!("unknown parameter `{name}`");
        };
        if p.grad.len() != grad.len() {
            invalid!("gradient for `{name}` has {} values, expected {}", grad.len(), p.grad.len());
        }
        for (a, g) in p.grad.iter_mut().zip(grad) {
            *a += g;
        }
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        match self.params.get(name) {
            Some(p) => Ok(&p.grad),
            None => invalid!("unknown parameter `{name}`"),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One bias-corrected Adam step on every parameter, then clears the
    /// gradient accumulators.
    pub fn adam_update(&mut self, cfg: &AdamConfig) {
        for p in self.params.values_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = p.grad[i];
                let m = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                p.grad[i] = 0.0;
            }
        }
    }

    /// Folds batch statistics recorded during a training forward pass into
    /// the running buffers: `running = momentum · running + (1 − momentum) · batch`.
    pub fn apply_running_updates(&mut self, updates: &[BnRunningUpdate]) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let buf = self.buffer_mut(&format!("{}.{suffix}", u.prefix))?;
                if buf.len() != batch.len() {
                    invalid!("running statistic `{}` width mismatch", u.prefix);
                }
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
        Ok(())
    }
}
