//! Run configuration: built-in defaults, overridden by a TOML file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hsonet_core::encoder::BackboneConfig;
use hsonet_core::loss::{EoLossConfig, LossKind, Schedule};
use hsonet_core::optim::{AdamConfig, StepLr};
use hsonet_core::synthdata::SynthParams;
use hsonet_core::ModelConfig;

use crate::error::{Error, Result};

/// Every tunable of a run. The seed drives weight init, data generation,
/// shuffling, cropping and augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub backbone: BackboneSection,
    pub model: ModelSection,
    pub synth: SynthSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            backbone: BackboneSection::default(),
            model: ModelSection::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps. Ignored when `epochs` is set.
    pub steps: u64,
    /// Passes over the training set; overrides `steps` when present.
    pub epochs: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Steps between learning-rate drops; half the run when absent.
    pub lr_step: Option<u64>,
    pub lr_gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Steps between learning-curve rows; 0 logs only at the end.
    pub eval_interval: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Side of the random square crop taken from each training pair.
    pub crop_size: Option<usize>,
    pub augment: bool,
    /// Binarization threshold for metrics and predicted masks.
    pub threshold: f64,
    /// Pairs per forward pass during evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            epochs: None,
            batch_size: 8,
            learning_rate: 5e-4,
            weight_decay: 5e-4,
            lr_step: None,
            lr_gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_interval: 200,
            checkpoint_dir: None,
            crop_size: None,
            augment: true,
            threshold: 0.5,
            eval_batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKindName {
    Bce,
    Focal,
    Eo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Linear,
    Exponential,
    Cosine,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKindName,
    pub gamma: f64,
    pub schedule: ScheduleName,
    /// Schedule horizon; the run length when absent.
    pub step: Option<u64>,
    pub decay: f64,
    pub eps: f64,
    pub literal_hardness: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let d = EoLossConfig::default();
        Self {
            kind: LossKindName::Eo,
            gamma: d.gamma,
            schedule: ScheduleName::Cosine,
            step: None,
            decay: d.decay,
            eps: d.eps,
            literal_hardness: d.literal_hardness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub pyramid_dim: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let d = BackboneConfig::default();
        Self {
            widths: d.widths,
            blocks: d.blocks,
            pyramid_dim: d.pyramid_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub decoder_dim: usize,
    pub head_dim: usize,
    pub bn_momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            decoder_dim: d.decoder_dim,
            head_dim: d.head_dim,
            bn_momentum: d.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Pairs written by `synth`.
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub persistent_objects: (usize, usize),
    pub object_half_size: (f64, f64),
    pub change_fraction: (f64, f64),
    pub hard_case_rate: f64,
    pub seasonal_rate: f64,
    pub noise_std: f64,
    pub perturb: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthParams::default();
        Self {
            n: 64,
            width: d.width,
            height: d.height,
            persistent_objects: d.persistent_objects,
            object_half_size: d.object_half_size,
            change_fraction: d.change_fraction,
            hard_case_rate: d.hard_case_rate,
            seasonal_rate: d.seasonal_rate,
            noise_std: d.noise_std,
            perturb: d.perturb,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    /// Fills in the values derived from other fields, given the training set size.
    pub fn resolve(&mut self, train_len: usize) {
        if let Some(epochs) = self.train.epochs {
            let per_epoch = train_len.div_ceil(self.train.batch_size.max(1)) as u64;
            self.train.steps = epochs * per_epoch;
        }
        if self.train.lr_step.is_none() {
            self.train.lr_step = Some((self.train.steps / 2).max(1));
        }
        if self.loss.step.is_none() {
            self.loss.step = Some(self.train.steps.max(1));
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let t = &self.train;
        if t.batch_size == 0 {
            errs.push("train.batch_size must be positive".to_string());
        }
        if t.eval_batch_size == 0 {
            errs.push("train.eval_batch_size must be positive".to_string());
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            errs.push(format!("train.learning_rate must be finite and >= 0, got {}", t.learning_rate));
        }
        if !(t.lr_gamma > 0.0 && t.lr_gamma.is_finite()) {
            errs.push(format!("train.lr_gamma must be positive, got {}", t.lr_gamma));
        }
        if t.lr_step == Some(0) {
            errs.push("train.lr_step must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&t.threshold) {
            errs.push(format!("train.threshold must lie in [0, 1], got {}", t.threshold));
        }
        if let Some(c) = t.crop_size {
            if c == 0 || c % hsonet_core::encoder::INPUT_MULTIPLE != 0 {
                errs.push(format!("train.crop_size {c} must be a positive multiple of 32"));
            }
        }
        if let Err(e) = self.adam().validate() {
            errs.push(e.to_string());
        }
        if self.loss.step == Some(0) {
            errs.push("loss.step must be positive".to_string());
        }
        if let Err(e) = self.loss_config().validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.model_config().validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.synth_params().validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.adam_eps,
            weight_decay: self.train.weight_decay,
        }
    }

    pub fn lr_schedule(&self) -> StepLr {
        StepLr {
            base: self.train.learning_rate,
            step_size: self.train.lr_step.unwrap_or((self.train.steps / 2).max(1)),
            gamma: self.train.lr_gamma,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss.kind {
            LossKindName::Bce => LossKind::Bce,
            LossKindName::Focal => LossKind::Focal,
            LossKindName::Eo => LossKind::Eo,
        }
    }

    pub fn loss_config(&self) -> EoLossConfig {
        EoLossConfig {
            gamma: self.loss.gamma,
            schedule: match self.loss.schedule {
                ScheduleName::Linear => Schedule::Linear,
                ScheduleName::Exponential => Schedule::Exponential,
                ScheduleName::Cosine => Schedule::Cosine,
                ScheduleName::None => Schedule::None,
            },
            step: self.loss.step.unwrap_or(self.train.steps).max(1),
            decay: self.loss.decay,
            eps: self.loss.eps,
            literal_hardness: self.loss.literal_hardness,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                widths: self.backbone.widths,
                blocks: self.backbone.blocks,
                pyramid_dim: self.backbone.pyramid_dim,
            },
            decoder_dim: self.model.decoder_dim,
            head_dim: self.model.head_dim,
            bn_momentum: self.model.bn_momentum,
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        let s = &self.synth;
        SynthParams {
            width: s.width,
            height: s.height,
            persistent_objects: s.persistent_objects,
            object_half_size: s.object_half_size,
            change_fraction: s.change_fraction,
            hard_case_rate: s.hard_case_rate,
            seasonal_rate: s.seasonal_rate,
            noise_std: s.noise_std,
            perturb: s.perturb,
        }
    }
}
