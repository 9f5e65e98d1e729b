//! Named parameter storage with deterministic, seeded initialisation.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    /// Uniform on `[-bound, bound]`.
    Uniform { bound: f64 },
}

/// Trainable parameters plus non-trainable buffers (normalisation running
/// statistics), both keyed by dotted path.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Path<'_> {
        Path {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    /// Parameters and buffers in one sorted map, as stored in checkpoints.
    pub fn all_tensors(&self) -> BTreeMap<String, Var> {
        let mut out = self.params.clone();
        out.extend(self.buffers.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameter count restricted to names starting with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    fn make(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        z * std
                    })
                    .collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect(),
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

/// A prefix into a [`ParamStore`] used while building modules.
pub struct Path<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Path<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Path<'_> {
        Path {
            prefix: self.key(name.as_ref()),
            store: &mut *self.store,
        }
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let key = self.key(name);
        assert!(!self.store.params.contains_key(&key), "duplicate parameter {key}");
        let var = Var::from_tensor(&self.store.make(shape, init)?)?;
        self.store.params.insert(key, var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let key = self.key(name);
        assert!(!self.store.buffers.contains_key(&key), "duplicate buffer {key}");
        let var = Var::from_tensor(&self.store.make(shape, Init::Const(value))?)?;
        self.store.buffers.insert(key, var.clone());
        Ok(var)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}
