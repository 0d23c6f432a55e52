//! Search and training configuration: published defaults, JSON parsing with
//! strict field checking, and validation.
//!
//! Every field except the task and the supernet dimensions has a default,
//! so a minimal config file only names what a run is searching over.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HinasError, Result};
use crate::loss::LossConfig;
use crate::supernet::RestorationTask;

/// Which restoration problem the networks solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Denoise,
    Sr,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Denoise => "denoise",
            TaskKind::Sr => "sr",
        }
    }
}

/// Kernel-optimizer settings: SGD with a cosine-annealed learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdSection {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: String,
}

impl Default for SgdSection {
    fn default() -> Self {
        SgdSection {
            lr_max: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            schedule: "cosine".into(),
        }
    }
}

/// Architecture-optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        AdamSection { lr: 1e-3, weight_decay: 1e-3 }
    }
}

fn d_epochs_max() -> usize {
    100
}
fn d_warmup() -> usize {
    20
}
fn d_eval_from() -> usize {
    61
}
fn d_patch() -> usize {
    64
}
fn d_true() -> bool {
    true
}

/// Everything a supernet search run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub task: TaskKind,
    /// Upscale factor; super-resolution only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    /// Basic width: the channel count of a level-0 cell node.
    pub w: usize,
    /// Nodes per cell.
    pub n: usize,
    /// Layers in the supernet.
    pub l: usize,
    /// Defaults to 8 for denoising and 24 for super-resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default = "d_epochs_max")]
    pub epochs_max: usize,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_eval_from")]
    pub eval_from_epoch: usize,
    #[serde(default)]
    pub sgd: SgdSection,
    #[serde(default)]
    pub adam: AdamSection,
    /// Layer-wise architectures: a distinct cell topology per layer.
    #[serde(default = "d_true")]
    pub lwas: bool,
    /// Run each supercell once on mixed inputs instead of once per input.
    #[serde(default = "d_true")]
    pub cell_sharing: bool,
    #[serde(default = "d_true")]
    pub residual: bool,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        // Paper-scale denoising supernet: 3 layers of 4-node cells. The
        // basic width is not pinned anywhere public; 16 keeps the default
        // runnable on one core.
        SearchConfig {
            task: TaskKind::Denoise,
            scale: None,
            w: 16,
            n: 4,
            l: 3,
            batch_size: None,
            epochs_max: d_epochs_max(),
            warmup_epochs: d_warmup(),
            eval_from_epoch: d_eval_from(),
            sgd: SgdSection::default(),
            adam: AdamSection::default(),
            lwas: true,
            cell_sharing: true,
            residual: true,
            loss: LossConfig::default(),
            patch: d_patch(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.task {
            TaskKind::Denoise => 8,
            TaskKind::Sr => 24,
        })
    }

    pub fn restoration_task(&self) -> Result<RestorationTask> {
        match self.task {
            TaskKind::Denoise => Ok(RestorationTask::Denoise { residual: self.residual }),
            TaskKind::Sr => {
                let scale = self
                    .scale
                    .ok_or_else(|| HinasError::Config("sr search needs a scale".into()))?;
                Ok(RestorationTask::SuperResolve { upscale: scale, residual: self.residual })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HinasError::Config(msg));
        if self.w == 0 || self.n == 0 || self.l == 0 {
            return bad(format!("supernet dimensions must be positive, got {}x{}x{}", self.w, self.n, self.l));
        }
        if !(self.warmup_epochs < self.eval_from_epoch && self.eval_from_epoch <= self.epochs_max) {
            return bad(format!(
                "epoch plan needs warmup < eval_from <= max, got {} / {} / {}",
                self.warmup_epochs, self.eval_from_epoch, self.epochs_max
            ));
        }
        if !(self.sgd.lr_min > 0.0 && self.sgd.lr_max >= self.sgd.lr_min) {
            return bad(format!("sgd rates must satisfy 0 < lr_min <= lr_max, got {} / {}", self.sgd.lr_min, self.sgd.lr_max));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || self.sgd.weight_decay < 0.0 {
            return bad("sgd momentum must be in [0,1) and weight decay nonnegative".into());
        }
        if self.sgd.schedule != "cosine" {
            return bad(format!("unknown lr schedule {:?} (only \"cosine\")", self.sgd.schedule));
        }
        if self.adam.lr <= 0.0 || self.adam.weight_decay < 0.0 {
            return bad("adam needs a positive lr and nonnegative weight decay".into());
        }
        if self.loss.lambda < 0.0 {
            return bad(format!("negative ssim weight {}", self.loss.lambda));
        }
        if self.batch_size() == 0 || self.patch == 0 {
            return bad("batch size and patch must be positive".into());
        }
        match self.task {
            TaskKind::Sr => match self.scale {
                Some(s) if (2..=4).contains(&s) => {
                    if self.patch % s != 0 {
                        return bad(format!("patch {} not divisible by scale {s}", self.patch));
                    }
                }
                Some(s) => return bad(format!("upscale factor {s} unsupported (expected 2, 3 or 4)")),
                None => return bad("sr search needs a scale".into()),
            },
            TaskKind::Denoise => {
                if self.scale.is_some() {
                    return bad("denoise config must not set a scale".into());
                }
            }
        }
        Ok(())
    }
}

fn d_iterations() -> u64 {
    5000
}
fn d_lr0() -> f64 {
    0.05
}
fn d_train_batch() -> usize {
    24
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    3e-4
}
fn d_eval_every() -> u64 {
    500
}
fn d_grad_clip() -> Option<f64> {
    Some(5.0)
}

/// Everything a compact-net training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_iterations")]
    pub iterations: u64,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_train_batch")]
    pub batch: usize,
    #[serde(default = "d_true")]
    pub augment: bool,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `null` disables clipping. Freshly built
    /// compact nets can start far from the identity (deep unnormalized stem →
    /// tail paths), and the first momentum steps diverge without a bound.
    #[serde(default = "d_grad_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default = "d_true")]
    pub residual: bool,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all train fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HinasError::Config(msg));
        if self.iterations == 0 {
            return bad("training needs at least one iteration".into());
        }
        if self.lr0 <= 0.0 {
            return bad(format!("initial learning rate {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0,1) and weight decay nonnegative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip threshold {c} must be positive"));
            }
        }
        if self.batch == 0 || self.patch == 0 || self.eval_every == 0 {
            return bad("batch, patch and eval_every must be positive".into());
        }
        if self.loss.lambda < 0.0 {
            return bad(format!("negative ssim weight {}", self.loss.lambda));
        }
        Ok(())
    }
}

pub fn load_search_config(path: &Path) -> Result<SearchConfig> {
    let text = std::fs::read_to_string(path).map_err(HinasError::io(path))?;
    let cfg: SearchConfig = serde_json::from_str(&text).map_err(HinasError::json(path))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(HinasError::io(path))?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(HinasError::json(path))?;
    cfg.validate()?;
    Ok(cfg)
}
