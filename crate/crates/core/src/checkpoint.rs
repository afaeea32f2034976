//! JSON checkpoints. Tensor values are stored as base64 of their
//! little-endian f64 bytes so that a round trip is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelBundle, PlmConfig};
use crate::nn::{AdamWConfig, AdamWState, ParamGroup, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorRecord {
    pub fn encode(name: &str, t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Data(format!("tensor {}: {}", self.name, e)))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Data(format!("tensor {}: truncated data", self.name)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(self.shape.clone(), data)
            .map_err(|e| Error::Data(format!("tensor {}: {}", self.name, e)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub name: String,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: AdamWConfig,
    pub m: Vec<Vec<TensorRecord>>,
    pub v: Vec<Vec<TensorRecord>>,
}

/// Everything needed to continue a run: parameters, optimizer moments, step
/// counters and the run seed (all randomness is derived from the seed and
/// the counters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: PlmConfig,
    pub frozen: bool,
    pub groups: Vec<GroupRecord>,
    pub optimizer: Option<OptimizerRecord>,
    pub seed: u64,
    pub step: usize,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Trainer bookkeeping (best validation loss and the like).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn encode_groups(groups: &[ParamGroup]) -> Vec<GroupRecord> {
    groups
        .iter()
        .map(|g| GroupRecord {
            name: g.name.clone(),
            peak_lr: g.peak_lr,
            weight_decay: g.weight_decay,
            tensors: g
                .names
                .iter()
                .zip(&g.params)
                .map(|(n, t)| TensorRecord::encode(n, t))
                .collect(),
        })
        .collect()
}

fn encode_moments(groups: &[ParamGroup], m: &[Vec<Tensor>]) -> Vec<Vec<TensorRecord>> {
    groups
        .iter()
        .zip(m)
        .map(|(g, ts)| {
            g.names
                .iter()
                .zip(ts)
                .map(|(n, t)| TensorRecord::encode(n, t))
                .collect()
        })
        .collect()
}

fn decode_moments(recs: &[Vec<TensorRecord>]) -> Result<Vec<Vec<Tensor>>> {
    recs.iter()
        .map(|g| g.iter().map(TensorRecord::decode).collect())
        .collect()
}

impl Checkpoint {
    pub fn new(
        bundle: &ModelBundle,
        optimizer: Option<&AdamWState>,
        seed: u64,
        step: usize,
        epoch: usize,
    ) -> Self {
        Self {
            format: FORMAT_VERSION,
            config: bundle.config.clone(),
            frozen: bundle.frozen,
            groups: encode_groups(&bundle.groups),
            optimizer: optimizer.map(|s| OptimizerRecord {
                config: s.config,
                m: encode_moments(&bundle.groups, &s.m),
                v: encode_moments(&bundle.groups, &s.v),
            }),
            seed,
            step,
            epoch,
            extra: serde_json::Value::Null,
        }
    }

    pub fn bundle(&self) -> Result<ModelBundle> {
        let reference = ModelBundle::init(&self.config, 0)?;
        let mut groups = Vec::with_capacity(self.groups.len());
        if self.groups.len() != reference.groups.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameter groups, expected {}",
                self.groups.len(),
                reference.groups.len()
            )));
        }
        for (rec, want) in self.groups.iter().zip(&reference.groups) {
            let mut g = ParamGroup::new(rec.name.clone(), rec.peak_lr, rec.weight_decay)?;
            if rec.name != want.name || rec.tensors.len() != want.params.len() {
                return Err(Error::Data(format!(
                    "parameter group {} does not match the config",
                    rec.name
                )));
            }
            for (t, (wn, wt)) in rec.tensors.iter().zip(want.names.iter().zip(&want.params)) {
                let v = t.decode()?;
                if &t.name != wn || v.shape() != wt.shape() {
                    return Err(Error::Data(format!(
                        "tensor {} {:?} where {} {:?} was expected",
                        t.name,
                        v.shape(),
                        wn,
                        wt.shape()
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "tensor {} holds non-finite values",
                        t.name
                    )));
                }
                g.push(t.name.clone(), v);
            }
            groups.push(g);
        }
        Ok(ModelBundle {
            config: self.config.clone(),
            groups,
            frozen: self.frozen,
        })
    }

    pub fn optimizer_state(&self) -> Result<Option<AdamWState>> {
        self.optimizer
            .as_ref()
            .map(|o| {
                Ok(AdamWState {
                    config: o.config,
                    m: decode_moments(&o.m)?,
                    v: decode_moments(&o.v)?,
                })
            })
            .transpose()
    }

    /// Writes to a sibling temp file first, then renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, s).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&s)?;
        if c.format != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint format {} (expected {})",
                path.display(),
                c.format,
                FORMAT_VERSION
            )));
        }
        Ok(c)
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    Checkpoint::new(bundle, None, 0, 0, 0).save(path)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    Checkpoint::load(path)?.bundle()
}
