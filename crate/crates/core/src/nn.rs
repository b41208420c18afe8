//! Parameter storage, initialization, and the Adam-style optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Tensor};
use crate::error::{Error, Result};

/// Named f64 parameter tensors with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// SHA-256 over names, shapes, and little-endian f64 bytes; used to
    /// verify that frozen policies stay frozen.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.map {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in tensor.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for &v in tensor.as_standard_layout().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Uniform Xavier/Glorot init: U(-limit, limit), limit = sqrt(6/(fan_in+fan_out)).
pub fn xavier_uniform(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-limit..limit))
}

pub fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Tensor {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        self.step += 1;
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
        Ok(())
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>, step: u64) {
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

/// Averages a list of per-sample gradient maps in a fixed order.
pub fn average_grads(parts: &[Grads]) -> Grads {
    let mut out = Grads::new();
    if parts.is_empty() {
        return out;
    }
    let scale = 1.0 / parts.len() as f64;
    for part in parts {
        for (name, grad) in part {
            match out.entry(name.clone()) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(grad.mapv(|v| v * scale));
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    *e.get_mut() = e.get() + &grad.mapv(|v| v * scale);
                }
            }
        }
    }
    out
}
