//! Versioned checkpoint container: config, weights, norm running stats,
//! optimizer state, and training progress, with an integrity digest.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::BatchNormState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MSGNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Last completed epoch (1-based); 0 means untrained.
    pub epoch: usize,
    pub global_seed: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub bn: Vec<(String, BatchNormState)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(model: &Model, epoch: usize, global_seed: u64, adam: Option<&AdamState>) -> Self {
        Checkpoint {
            config: model.cfg.clone(),
            epoch,
            global_seed,
            params: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.shape.clone(), p.value.values.clone()))
                .collect(),
            bn: model.bn_states(),
            adam: adam.cloned(),
        }
    }

    /// Rebuild the model this checkpoint was captured from. Weights, norm
    /// stats, and the parameter order are restored bit-exactly.
    pub fn restore(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), self.global_seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                model.params.len(),
                self.params.len()
            )));
        }
        for (name, shape, values) in &self.params {
            let id = model.params.id_by_name(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint parameter {name} not in model"))
            })?;
            let p = model.params.get_mut(id);
            if p.value.shape != *shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} in model, {shape:?} in checkpoint",
                    p.value.shape
                )));
            }
            p.value = Tensor::new(shape.clone(), values.clone())?;
        }
        model.set_bn_states(&self.bn)?;
        Ok(model)
    }

    /// Serialize as MAGIC | version | digest(body) | body.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_vec(self)
            .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
        let digest = Sha256::digest(&body);
        let mut out = Vec::with_capacity(body.len() + 44);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&digest);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 44 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let stored = &bytes[12..44];
        let body = &bytes[44..];
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored {
            return Err(Error::Checkpoint("integrity digest mismatch".into()));
        }
        serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("deserialize failed: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable listing: every tensor with shape and size, plus both
    /// totals (norm scale/shift included and excluded).
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let mut with_bn = 0usize;
        let mut bn_affine = 0usize;
        for (name, shape, values) in &self.params {
            out.push_str(&format!("{name} {shape:?} {}\n", values.len()));
            with_bn += values.len();
            if name.contains(".bn") && (name.ends_with(".gamma") || name.ends_with(".beta")) {
                bn_affine += values.len();
            }
        }
        out.push_str(&format!("total {with_bn}\n"));
        out.push_str(&format!("total-excluding-norm-affine {}\n", with_bn - bn_affine));
        out
    }
}
