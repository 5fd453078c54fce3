//! Checkpoint container: an 8-byte magic, a length-prefixed JSON manifest
//! (config, tensor directory, epoch, optimizer and RNG state), then raw
//! little-endian f32 payloads. Save -> load -> save is byte-identical.

use crate::error::{Error, Result};
use crate::metrics::NormStats;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"VTADLCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    /// Master seed; per-epoch streams derive from it, so (seed, epoch)
    /// pins the whole remaining trajectory.
    rng_seed: u64,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
    norm_stats: Option<NormStats>,
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub rng_seed: u64,
    pub adam_t: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub norm_stats: Option<NormStats>,
}

impl Checkpoint {
    /// Snapshots a model plus optimizer into a checkpoint.
    pub fn capture(
        model: &Model<f32>,
        opt: &Adam<f32>,
        train: &TrainConfig,
        epoch: usize,
        norm_stats: Option<NormStats>,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = model
            .named_params()
            .into_iter()
            .map(|(name, t)| (format!("param.{name}"), t.clone()))
            .collect();
        for (name, t) in model.bn_state_tensors() {
            tensors.push((format!("bnstate.{name}"), t));
        }
        for (i, (name, t)) in model.named_params().into_iter().enumerate() {
            tensors.push((
                format!("adam.m.{name}"),
                Tensor::new(t.shape().to_vec(), opt.m[i].clone()).unwrap(),
            ));
            tensors.push((
                format!("adam.v.{name}"),
                Tensor::new(t.shape().to_vec(), opt.v[i].clone()).unwrap(),
            ));
        }
        Checkpoint {
            config: model.config().clone(),
            train: train.clone(),
            epoch,
            rng_seed: train.seed,
            adam_t: opt.t,
            tensors,
            norm_stats,
        }
    }

    fn lookup(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))
    }

    /// Rebuilds the model and optimizer this checkpoint describes.
    pub fn restore(&self) -> Result<(Model<f32>, Adam<f32>)> {
        let mut model = Model::new(self.config.clone(), 0)?;
        for (name, t) in model.named_params_mut() {
            let stored = self
                .tensors
                .iter()
                .find(|(n, _)| *n == format!("param.{name}"))
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("checkpoint missing tensor param.{name}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint restore",
                    expected: format!("{:?} for {name}", t.shape()),
                    got: format!("{:?}", stored.shape()),
                });
            }
            *t = stored.clone();
        }
        for i in 0..model.bn_stats.len() {
            let mean = self.lookup(&format!("bnstate.decoder.{i}.running_mean"))?;
            let var = self.lookup(&format!("bnstate.decoder.{i}.running_var"))?;
            model.set_bn_state(i, mean.data().to_vec(), var.data().to_vec());
        }
        let mut opt = Adam::new(&self.train, &crate::trainer::param_sizes(&model));
        opt.t = self.adam_t;
        for (i, (name, _)) in model.named_params().into_iter().enumerate() {
            opt.m[i] = self.lookup(&format!("adam.m.{name}"))?.data().to_vec();
            opt.v[i] = self.lookup(&format!("adam.v.{name}"))?.data().to_vec();
        }
        Ok((model, opt))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel() as u64,
            });
            offset += t.numel() as u64;
        }
        let manifest = Manifest {
            version: VERSION,
            config: self.config.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            rng_seed: self.rng_seed,
            adam_t: self.adam_t,
            tensors: entries,
            norm_stats: self.norm_stats,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + manifest_bytes.len() + offset as usize * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[0..8] != MAGIC {
            let got = u32::from_be_bytes([
                *bytes.first().unwrap_or(&0),
                *bytes.get(1).unwrap_or(&0),
                *bytes.get(2).unwrap_or(&0),
                *bytes.get(3).unwrap_or(&0),
            ]);
            return Err(Error::BadMagic {
                path: path.into(),
                got,
                expected: u32::from_be_bytes([MAGIC[0], MAGIC[1], MAGIC[2], MAGIC[3]]),
            });
        }
        let manifest_len =
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest_end = 16 + manifest_len;
        if bytes.len() < manifest_end {
            return Err(Error::LengthMismatch {
                path: path.into(),
                detail: format!(
                    "manifest of {manifest_len} bytes does not fit in {} remaining",
                    bytes.len() - 16
                ),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
        if manifest.version != VERSION {
            return Err(Error::Version {
                got: manifest.version,
                expected: VERSION,
            });
        }
        let total_floats: u64 = manifest.tensors.iter().map(|e| e.len).sum();
        let expected_len = manifest_end + total_floats as usize * 4;
        if bytes.len() != expected_len {
            return Err(Error::LengthMismatch {
                path: path.into(),
                detail: format!("expected {} bytes, file has {}", expected_len, bytes.len()),
            });
        }
        let payload = &bytes[manifest_end..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let start = entry.offset as usize * 4;
            let end = start + entry.len as usize * 4;
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let expected: usize = entry.shape.iter().product();
            if expected != data.len() {
                return Err(Error::LengthMismatch {
                    path: path.into(),
                    detail: format!(
                        "tensor {} shape {:?} does not match payload of {}",
                        entry.name,
                        entry.shape,
                        data.len()
                    ),
                });
            }
            tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        }
        Ok(Checkpoint {
            config: manifest.config,
            train: manifest.train,
            epoch: manifest.epoch,
            rng_seed: manifest.rng_seed,
            adam_t: manifest.adam_t,
            tensors,
            norm_stats: manifest.norm_stats,
        })
    }
}
