//! Named parameter storage and the Adam optimiser.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// How a model's parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Named leaves that receive gradients.
    Trainable,
    /// Constants; nothing flows back into them.
    Frozen,
}

/// Parameters keyed by unique name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        debug_assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph, name: &str, binding: Binding) -> Result<Var> {
        let t = self
            .map
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        Ok(match binding {
            Binding::Trainable => g.param(name, t),
            Binding::Frozen => g.constant(t.clone()),
        })
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &Params) -> Result<()> {
        for (name, t) in &self.map {
            match other.map.get(name) {
                None => return Err(Error::MissingParameter(name.clone())),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::ShapeMismatch {
                        op: "parameter layout",
                        left: t.shape().to_vec(),
                        right: o.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = other.map.keys().find(|k| !self.map.contains_key(*k)) {
            return Err(Error::CorruptCheckpoint(format!(
                "unexpected parameter `{extra}`"
            )));
        }
        Ok(())
    }
}

/// Gaussian init scaled by `gain / sqrt(fan_in)`.
pub fn init_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut RngStream) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.normal())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
