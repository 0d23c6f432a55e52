//! Checkpoint files: every trainable parameter and running buffer by name,
//! optimizer state, and the run's config echo, in one tagged JSON document.
//!
//! Values are stored as 64-bit floats regardless of the in-memory scalar
//! type, so a checkpoint written by an f32 run restores bit-exactly into an
//! f32 net.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CkptError, HinasError, Result};
use crate::optim::{AdamState, SgdState};
use crate::scalar::Scalar;
use crate::tensor::Param;

pub const FORMAT_TAG: &str = "hinas-ckpt-v1";

/// One saved training state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// "search" or "train"; guards against restoring across run types.
    pub kind: String,
    /// Completed search epochs or training iterations.
    pub progress: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_ssim: Option<f64>,
    /// Echo of the config the run started from.
    pub config: serde_json::Value,
    pub params: BTreeMap<String, Vec<f64>>,
    pub buffers: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgd: Option<SgdState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value, seed: u64) -> Self {
        Checkpoint {
            format: FORMAT_TAG.into(),
            kind: kind.into(),
            progress: 0,
            seed,
            val_psnr: None,
            val_ssim: None,
            config,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            sgd: None,
            adam: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(HinasError::json(path))?;
        std::fs::write(path, text + "\n").map_err(HinasError::io(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(HinasError::io(path))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(HinasError::json(path))?;
        if ckpt.format != FORMAT_TAG {
            return Err(CkptError::BadFormat(ckpt.format).into());
        }
        Ok(ckpt)
    }

    pub fn expect_kind(&self, expected: &'static str) -> Result<(), CkptError> {
        if self.kind != expected {
            return Err(CkptError::WrongKind { expected, got: self.kind.clone() });
        }
        Ok(())
    }

    /// Records the current values of `params`, replacing earlier snapshots.
    pub fn capture_params<F: Scalar>(&mut self, params: &[Param<F>]) {
        for p in params {
            let values = p.value().iter().map(|&v| Scalar::to_f64(v)).collect();
            self.params.insert(p.name(), values);
        }
    }

    /// Writes stored values back into `params`, matching by name.
    pub fn restore_params<F: Scalar>(&self, params: &[Param<F>]) -> Result<(), CkptError> {
        for p in params {
            let name = p.name();
            let stored =
                self.params.get(&name).ok_or_else(|| CkptError::MissingEntry(name.clone()))?;
            if stored.len() != p.numel() {
                return Err(CkptError::SizeMismatch {
                    name,
                    expected: p.numel(),
                    got: stored.len(),
                });
            }
            p.set_value(stored.iter().map(|&v| F::from_f64(v)).collect());
        }
        Ok(())
    }

    /// Records running buffers; drive this from a net's `visit_buffers`.
    pub fn capture_buffer<F: Scalar>(&mut self, name: &str, values: &[F]) {
        self.buffers
            .insert(name.to_string(), values.iter().map(|&v| Scalar::to_f64(v)).collect());
    }

    /// Looks up one stored buffer and copies it into `dst`.
    pub fn restore_buffer<F: Scalar>(&self, name: &str, dst: &mut Vec<F>) -> Result<(), CkptError> {
        let stored =
            self.buffers.get(name).ok_or_else(|| CkptError::MissingEntry(name.to_string()))?;
        if stored.len() != dst.len() {
            return Err(CkptError::SizeMismatch {
                name: name.to_string(),
                expected: dst.len(),
                got: stored.len(),
            });
        }
        dst.clear();
        dst.extend(stored.iter().map(|&v| F::from_f64(v)));
        Ok(())
    }
}
