use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::graph::BatchStats;
use crate::tensor::Tensor;

/// First and second moment estimates for [`ParameterSet::adam_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Named trainable tensors with same-shape gradient slots, plus
/// non-trainable buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    has_grads: bool,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let slot = self.grads.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.len() != g.len() {
            return Err(shape_err("accumulate_grad", format!("{}: {:?} vs {:?}", name, slot.shape(), g.shape())));
        }
        slot.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        self.has_grads = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
        self.has_grads = false;
    }

    /// Plain SGD: `p <- p - lr * grad(p)`, then zero the gradients.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !self.has_grads {
            return Err(Error::MissingGradients);
        }
        for (name, p) in self.params.iter_mut() {
            let g = &self.grads[name];
            p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
        }
        self.zero_grad();
        Ok(())
    }

    /// Adam update with bias correction, then zero the gradients. Moment
    /// estimates live in `state` so the set itself stays optimizer-agnostic.
    pub fn adam_step(&mut self, state: &mut AdamState, lr: f64) -> Result<()> {
        if !self.has_grads {
            return Err(Error::MissingGradients);
        }
        state.t += 1;
        let (b1, b2) = (state.beta1, state.beta2);
        let c1 = 1.0 - libm::pow(b1, state.t as f64);
        let c2 = 1.0 - libm::pow(b2, state.t as f64);
        for (name, p) in self.params.iter_mut() {
            let g = &self.grads[name];
            let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / (libm::sqrt(*v / c2) + state.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Folds batch statistics into `<prefix>.running_mean/var`:
    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats, momentum: f64) -> Result<()> {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{}.{}", prefix, suffix);
            let buf = self.buffers.get_mut(&name).ok_or(Error::UnknownParameter(name))?;
            if buf.len() != batch.len() {
                return Err(shape_err("update_running_stats", prefix.to_string()));
            }
            buf.data_mut()
                .iter_mut()
                .zip(batch.iter())
                .for_each(|(r, b)| *r = momentum * *r + (1.0 - momentum) * b);
        }
        Ok(())
    }

    /// Target-network tracking: `self <- tau * source + (1 - tau) * self`
    /// for every parameter (buffers are copied with the same rule).
    pub fn soft_update_from(&mut self, source: &ParameterSet, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {} outside [0, 1]", tau)));
        }
        if self.params.len() != source.params.len() || self.buffers.len() != source.buffers.len() {
            return Err(shape_err("soft_update", "parameter sets differ"));
        }
        for (name, dst) in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let src = source
                .params
                .get(name)
                .or_else(|| source.buffers.get(name))
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if src.shape() != dst.shape() {
                return Err(shape_err("soft_update", format!("{}: {:?} vs {:?}", name, src.shape(), dst.shape())));
            }
            if tau == 1.0 {
                dst.data_mut().copy_from_slice(src.data());
            } else if tau != 0.0 {
                dst.data_mut()
                    .iter_mut()
                    .zip(src.data())
                    .for_each(|(d, s)| *d = tau * s + (1.0 - tau) * *d);
            }
        }
        Ok(())
    }

    /// Replaces every tensor (parameters and buffers) from `other`, which must
    /// have the same names and shapes.
    pub fn load_from(&mut self, other: &ParameterSet) -> Result<()> {
        self.soft_update_from(other, 1.0)
    }
}
