//! Versioned checkpoint container: magic, format version, a JSON manifest
//! (names, shapes, dtype, epoch, optimizer step, config fingerprint, model
//! config) and raw little-endian tensor payloads.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::ModelConfig;
use crate::error::{Error, Result};
use crate::model::AsdModel;

const MAGIC: &[u8; 8] = b"ASDNBCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Role of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Last completed epoch.
    pub epoch: u32,
    pub adam_step: u64,
    pub fingerprint: String,
    pub model_config: ModelConfig,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Host copy of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor(kind: TensorKind, t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let bytes = match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        };
        Ok(Self {
            kind,
            shape: t.dims().to_vec(),
            dtype: t.dtype(),
            bytes,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let dev = Device::Cpu;
        Ok(match self.dtype {
            DType::F32 => {
                let v: Vec<f32> = self
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &dev)?
            }
            DType::F64 => {
                let v: Vec<f64> = self
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &dev)?
            }
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        })
    }
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unknown dtype {other:?}"))),
    }
}

/// SHA-256 over the canonical JSON of a model config.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Optimizer state that travels with a checkpoint.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: u32,
    pub adam_step: u64,
    pub model_config: ModelConfig,
    pub dtype: DType,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    /// Snapshot of a model's parameters and buffers plus optional optimizer
    /// moments.
    pub fn capture(model: &AsdModel, optimizer: Option<&OptimizerState>, epoch: u32) -> Result<Self> {
        let store = model.store();
        let mut tensors = BTreeMap::new();
        for (name, var) in store.params() {
            tensors.insert(name.clone(), StoredTensor::from_tensor(TensorKind::Param, var.as_tensor())?);
        }
        for (name, var) in store.buffers() {
            tensors.insert(name.clone(), StoredTensor::from_tensor(TensorKind::Buffer, var.as_tensor())?);
        }
        let mut adam_step = 0;
        if let Some(opt) = optimizer {
            adam_step = opt.step;
            for (name, t) in &opt.m {
                tensors.insert(format!("adam.m.{name}"), StoredTensor::from_tensor(TensorKind::AdamM, t)?);
            }
            for (name, t) in &opt.v {
                tensors.insert(format!("adam.v.{name}"), StoredTensor::from_tensor(TensorKind::AdamV, t)?);
            }
        }
        Ok(Self {
            epoch,
            adam_step,
            model_config: model.config().clone(),
            dtype: model.dtype(),
            tensors,
        })
    }

    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.model_config)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                kind: t.kind,
                shape: t.shape.clone(),
                dtype: dtype_name(t.dtype)?.to_string(),
                offset,
                len: t.bytes.len() as u64,
            });
            offset += t.bytes.len() as u64;
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            epoch: self.epoch,
            adam_step: self.adam_step,
            fingerprint: self.fingerprint(),
            model_config: self.model_config.clone(),
            dtype: dtype_name(self.dtype)?.to_string(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for t in self.tensors.values() {
            w.write_all(&t.bytes).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("<checkpoint>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json).map_err(io)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        if manifest.fingerprint != config_fingerprint(&manifest.model_config) {
            return Err(Error::Checkpoint("config fingerprint does not match manifest".into()));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(io)?;
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let dtype = parse_dtype(&e.dtype)?;
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            let expected = e.shape.iter().product::<usize>() * dtype.size_in_bytes();
            if end > payload.len() || e.len as usize != expected {
                return Err(Error::Checkpoint(format!("payload of {} is truncated or mis-sized", e.name)));
            }
            tensors.insert(
                e.name.clone(),
                StoredTensor {
                    kind: e.kind,
                    shape: e.shape.clone(),
                    dtype,
                    bytes: payload[start..end].to_vec(),
                },
            );
        }
        Ok(Self {
            epoch: manifest.epoch,
            adam_step: manifest.adam_step,
            model_config: manifest.model_config,
            dtype: parse_dtype(&manifest.dtype)?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write_to(std::io::BufWriter::new(f))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn build_model(&self) -> Result<AsdModel> {
        let model = AsdModel::new(self.model_config.clone(), self.dtype)?;
        self.load_into(&model)?;
        Ok(model)
    }

    /// Copies parameters and buffers into `model`. Every model tensor must
    /// be present with the same shape, and every stored parameter must exist
    /// in the model.
    pub fn load_into(&self, model: &AsdModel) -> Result<()> {
        let all = model.store().all_tensors();
        let weights = self.tensors.iter().filter(|(_, t)| matches!(t.kind, TensorKind::Param | TensorKind::Buffer));
        if let Some((name, _)) = weights.into_iter().find(|(name, _)| !all.contains_key(*name)) {
            return Err(Error::Checkpoint(format!("checkpoint tensor {name} has no counterpart in the model")));
        }
        for (name, var) in &all {
            let stored = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("model tensor {name} missing from checkpoint")))?;
            if stored.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                    stored.shape,
                    var.dims()
                )));
            }
            var.set(&stored.to_tensor()?.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Optimizer moments stored alongside the parameters.
    pub fn optimizer_state(&self) -> Result<OptimizerState> {
        let mut st = OptimizerState {
            step: self.adam_step,
            ..Default::default()
        };
        for (name, t) in &self.tensors {
            match t.kind {
                TensorKind::AdamM => {
                    st.m.insert(name.trim_start_matches("adam.m.").to_string(), t.to_tensor()?);
                }
                TensorKind::AdamV => {
                    st.v.insert(name.trim_start_matches("adam.v.").to_string(), t.to_tensor()?);
                }
                _ => {}
            }
        }
        Ok(st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = AsdModel::new(ModelConfig::tiny(), DType::F32).unwrap();
        let mut opt = OptimizerState {
            step: 7,
            ..Default::default()
        };
        let (name, var) = model.store().params().iter().next().unwrap();
        opt.m.insert(name.clone(), (var.as_tensor() * 0.5).unwrap());
        opt.v.insert(name.clone(), var.as_tensor().sqr().unwrap());
        let ck = Checkpoint::capture(&model, Some(&opt), 3).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.adam_step, 7);
        assert_eq!(back.tensors, ck.tensors);

        let rebuilt = back.build_model().unwrap();
        for (name, var) in model.store().all_tensors() {
            let a = var.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = rebuilt.store().all_tensors()[&name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
        }
        let st = back.optimizer_state().unwrap();
        assert_eq!(st.m.len(), 1);
        assert_eq!(st.v.len(), 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let small = AsdModel::new(ModelConfig::tiny(), DType::F32).unwrap();
        let ck = Checkpoint::capture(&small, None, 1).unwrap();
        let other = AsdModel::new(ModelConfig::scaled(4), DType::F32).unwrap();
        assert!(matches!(ck.load_into(&other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let model = AsdModel::new(ModelConfig::tiny(), DType::F32).unwrap();
        let mut buf = Vec::new();
        Checkpoint::capture(&model, None, 1).unwrap().write_to(&mut buf).unwrap();
        buf[0] ^= 0xff;
        assert!(matches!(Checkpoint::read_from(buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
