//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub trait Optimizer {
    /// Applies one update from `grads`. Parameters without a gradient are left alone.
    fn step(&mut self, grads: &GradStore) -> Result<()>;

    fn learning_rate(&self) -> f64;

    /// Internal state as named tensors plus the update counter, for checkpoints.
    fn state(&self) -> (u64, BTreeMap<String, Tensor>);

    fn load_state(&mut self, steps: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Debug)]
pub struct Adam {
    store: ParamStore,
    cfg: AdamConfig,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        if store.is_frozen() {
            return Err(Error::Config("cannot optimize a frozen parameter store".into()));
        }
        if !(cfg.lr > 0.0 && (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2)) {
            return Err(Error::Config(format!("invalid Adam settings {cfg:?}")));
        }
        Ok(Self {
            store: store.clone(),
            cfg,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

impl Optimizer for Adam {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (name, var) in self.store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.m.get(&name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }

    fn state(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        (self.steps, out)
    }

    fn load_state(&mut self, steps: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, t) in tensors {
            let (slot, name) = match (k.strip_prefix("m."), k.strip_prefix("v.")) {
                (Some(n), _) => (&mut m, n),
                (_, Some(n)) => (&mut v, n),
                _ => return Err(Error::Checkpoint(format!("unexpected optimizer entry `{k}`"))),
            };
            let var = self
                .store
                .var(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))?;
            if var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state `{k}` has shape {:?}, parameter has {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            slot.insert(name.to_string(), t.to_dtype(var.dtype())?);
        }
        self.steps = steps;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
