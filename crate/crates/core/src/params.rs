//! Named parameter storage, trainability flags, the training schedule, and
//! the adaptive-moment optimizer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// One named tensor plus its trainability flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered map of named parameters. Iteration order is the sorted name
/// order, which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        self.map.insert(name.to_string(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid("parameter name", format!("`{name}` not found")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.map.get_mut(name) {
            Some(p) => Ok(&mut p.tensor),
            None => Err(Error::invalid(
                "parameter name",
                format!("`{name}` not found"),
            )),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Set the trainable flag on every parameter whose name matches.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for (name, p) in self.map.iter_mut() {
            if pred(name) {
                p.trainable = trainable;
            }
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|p| p.tensor.len()).sum()
    }
}

/// Training hyperparameters shared by the injection-module and pose trainers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Weight on the spectral term of the composite reconstruction loss.
    pub lambda_freq: f64,
    pub epochs: usize,
    pub lr_initial: f64,
    /// Learning rate after the step drop.
    pub lr_late: f64,
    /// Epoch (1-based boundary) at which the rate drops: epochs with index
    /// < `lr_drop_epoch` use `lr_initial`, the rest use `lr_late`.
    pub lr_drop_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_freq: 4e-4,
            epochs: 40,
            lr_initial: 4e-4,
            lr_late: 4e-5,
            lr_drop_epoch: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_freq < 0.0 {
            return Err(Error::invalid("lambda_freq", "must be >= 0"));
        }
        if self.lr_initial <= 0.0 || self.lr_late <= 0.0 {
            return Err(Error::invalid("learning rate", "must be > 0"));
        }
        if self.lr_drop_epoch == 0 || self.lr_drop_epoch > self.epochs {
            return Err(Error::invalid(
                "lr_drop_epoch",
                format!(
                    "must satisfy 0 < {} <= epochs ({})",
                    self.lr_drop_epoch, self.epochs
                ),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("epochs/batch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr_initial
        } else {
            self.lr_late
        }
    }
}

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Adam {
        Adam::default()
    }

    /// Apply one update. Only parameters that are BOTH trainable and present
    /// in `grads` move; attempting to update a frozen parameter is an error.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = match params.map.get_mut(name) {
                Some(p) => p,
                None => {
                    return Err(Error::invalid(
                        "gradient name",
                        format!("`{name}` not in parameter set"),
                    ))
                }
            };
            if !param.trainable {
                return Err(Error::NotFrozen(name.clone()));
            }
            let n = param.tensor.len();
            assert_eq!(grad.len(), n, "gradient shape for `{name}`");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for k in 0..n {
                let g = grad.data[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                param.tensor.data[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
