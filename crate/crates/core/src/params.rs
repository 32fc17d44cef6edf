//! Named, seeded parameter storage.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a dotted name. Initial
//! values are drawn from an RNG seeded by `(store seed, full name)`, so adding or
//! removing a sub-module never perturbs the initialization of the others. A
//! frozen view hands out detached tensors that share storage with the variables:
//! in-place updates remain visible, but no gradient is ever tracked through them.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
}

impl Init {
    /// PyTorch-style fan-in uniform bound.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
    dtype: DType,
    device: Device,
    frozen: bool,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("len", &self.len())
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .field("frozen", &self.frozen)
            .finish()
    }
}

fn fnv1a(seed: u64, name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            dtype,
            device: device.clone(),
            frozen: false,
        }
    }

    /// A view over the same variables whose tensors never track gradients.
    pub fn frozen(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted `(name, var)` pairs.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    /// `(name, dims)` for every parameter; the basis of ablation diffs.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.vars
            .lock()
            .unwrap()
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Detached snapshot of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let vars = self.vars.lock().unwrap();
        let mut out = BTreeMap::new();
        for (k, v) in vars.iter() {
            out.insert(k.clone(), v.as_detached_tensor().copy()?);
        }
        Ok(out)
    }

    /// Overwrites every parameter present in both the store and `tensors`.
    /// Parameters missing from `tensors` are an error; extra tensors are ignored.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        for (k, v) in vars.iter() {
            let t = tensors
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{k}`")))?;
            if t.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{k}` has shape {:?}, expected {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Copies values from a store holding the same names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load(&other.snapshot()?)
    }

    /// Order-sensitive hash of all parameter bits.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (k, v) in self.vars.lock().unwrap().iter() {
            for b in k.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            let vals = v
                .as_detached_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for x in vals {
                h = (h ^ x.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Ok(h)
    }

    fn get_or_init(&self, name: &str, shape: Shape, init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        let var = match vars.get(name) {
            Some(v) => {
                if v.shape() != &shape {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` requested with shape {shape:?} but stored as {:?}",
                        v.dims()
                    )));
                }
                v.clone()
            }
            None => {
                let n = shape.elem_count();
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, name));
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Const(c) => vec![c; n],
                    Init::Normal { std } => {
                        let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                        (0..n).map(|_| d.sample(&mut rng)).collect()
                    }
                    Init::Uniform { bound } => {
                        let d = Uniform::new_inclusive(-bound, bound)
                            .map_err(|e| Error::Config(e.to_string()))?;
                        (0..n).map(|_| d.sample(&mut rng)).collect()
                    }
                };
                let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
                let v = Var::from_tensor(&t)?;
                vars.insert(name.to_string(), v.clone());
                v
            }
        };
        Ok(if self.frozen {
            var.as_detached_tensor()
        } else {
            var.as_tensor().clone()
        })
    }
}

/// A dotted-prefix cursor into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get_or_init(&full, shape.into(), init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
