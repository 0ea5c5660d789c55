//! TOML run configuration. Every field has a default, so a config file only
//! lists what it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hsi_ldm_core::eval::ClassifierConfig;
use hsi_ldm_core::schedule::NoiseSchedule;
use hsi_ldm_core::trainer::{LdmConfig, TrainConfig};
use hsi_ldm_core::vae::{VaeConfig, VaeTrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Must fit in a signed 64-bit TOML integer.
    pub seed: u64,
    pub paths: PathsConfig,
    pub toy: ToyConfig,
    pub split: SplitConfig,
    pub vae: VaeSection,
    pub ldm: LdmSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub cube: PathBuf,
    pub captions: PathBuf,
    /// Directory for checkpoints, archives and reports.
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Training patches for classes `1, 2, …`.
    pub per_class_train: Vec<usize>,
    pub unlabeled: usize,
    pub patch_side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub lambda_kl: f64,
    pub lambda_adv: f64,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdmSection {
    /// Diffusion steps `T`.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub text_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub unlabeled_batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    pub cond_drop_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub omega: f64,
    /// DDIM subsequence length.
    pub steps: usize,
    pub eta: f64,
    /// Sample balance rate; 0 disables expansion.
    pub lambda: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Repetitions of expansion + classifier training, one per seed offset.
    pub seeds: Vec<u64>,
    /// Generated patches per class for fidelity, spectra and PCA.
    pub samples_per_class: usize,
    pub classifier_hidden: usize,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
    pub classifier_lr: f64,
    /// Diffusion step at which attention maps are recorded.
    pub attention_step: usize,
    pub omegas: Vec<f64>,
}


impl Default for PathsConfig {
    fn default() -> Self {
        Self { cube: "data/cube.hsc".into(), captions: "data/captions.jsonl".into(), out: "run".into() }
    }
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { classes: 3, bands: 8, height: 32, width: 32 }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { per_class_train: vec![3, 8, 15], unlabeled: 128, patch_side: 9 }
    }
}

impl Default for VaeSection {
    fn default() -> Self {
        Self { epochs: 4000, batch_size: 64, steps_per_epoch: None, lr: 1e-3, lambda_kl: 1e-4, lambda_adv: 0.1, hidden: 32 }
    }
}

impl Default for LdmSection {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_min: 1e-4,
            beta_max: 0.02,
            dim: 64,
            heads: 8,
            blocks: 4,
            text_layers: 3,
            epochs: 2000,
            batch_size: 64,
            unlabeled_batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.01,
            ema_alpha: 0.99,
            cond_drop_prob: 0.1,
        }
    }
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { omega: 0.7, steps: 50, eta: 0.0, lambda: 0.4, count: 4, caption: None }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            samples_per_class: 8,
            classifier_hidden: 16,
            classifier_epochs: 400,
            classifier_batch_size: 64,
            classifier_lr: 5e-3,
            attention_step: 250,
            omegas: vec![0.0, 0.35, 0.7, 1.0, 1.5, 2.0],
        }
    }
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(what()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Settings of the desk-scale toy run: short training, a narrow model.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.vae.epochs = 200;
        cfg.ldm.epochs = 300;
        cfg.ldm.dim = 32;
        cfg.ldm.heads = 4;
        cfg.ldm.blocks = 2;
        cfg.ldm.text_layers = 2;
        cfg.ldm.lr = 1e-3;
        cfg.ldm.unlabeled_batch_size = 32;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.toy;
        check(t.classes >= 2, || format!("toy.classes must be at least 2, got {}", t.classes))?;
        check(t.bands >= 4, || format!("toy.bands must be at least 4, got {}", t.bands))?;
        check(t.height > 0 && t.width > 0, || "toy dimensions must be positive".into())?;
        let s = &self.split;
        check(s.patch_side % 2 == 1, || format!("split.patch_side must be odd, got {}", s.patch_side))?;
        check(!s.per_class_train.is_empty() && s.per_class_train.iter().all(|&n| n > 0), || "split.per_class_train needs a positive count per class".into())?;
        let v = &self.vae;
        check(v.epochs > 0 && v.batch_size > 0 && v.hidden > 0, || "vae epochs, batch_size and hidden must be positive".into())?;
        check(v.lr > 0.0 && v.lambda_kl >= 0.0 && v.lambda_adv >= 0.0, || "vae lr must be positive and loss weights nonnegative".into())?;
        check(v.steps_per_epoch != Some(0), || "vae.steps_per_epoch must be positive when set".into())?;
        let l = &self.ldm;
        NoiseSchedule::linear(l.steps, l.beta_min, l.beta_max)?;
        check(l.heads > 0 && l.dim.is_multiple_of(l.heads) && l.dim.is_multiple_of(4), || format!("ldm.dim {} must be a multiple of 4 and of ldm.heads {}", l.dim, l.heads))?;
        check(l.blocks > 0 && l.epochs > 0, || "ldm blocks and epochs must be positive".into())?;
        self.train_config(0).validate()?;
        let p = &self.sample;
        check(p.omega >= 0.0, || format!("sample.omega must be nonnegative, got {}", p.omega))?;
        check(p.steps >= 1 && p.steps <= l.steps, || format!("sample.steps must be in 1..={}, got {}", l.steps, p.steps))?;
        check((0.0..=1.0).contains(&p.eta), || format!("sample.eta must be in [0, 1], got {}", p.eta))?;
        check(p.lambda >= 0.0 && p.lambda.is_finite(), || format!("sample.lambda must be nonnegative, got {}", p.lambda))?;
        check(p.count >= 1, || "sample.count must be at least 1".into())?;
        let e = &self.eval;
        check(!e.seeds.is_empty(), || "eval.seeds must not be empty".into())?;
        check(e.samples_per_class >= 2, || "eval.samples_per_class must be at least 2".into())?;
        check(e.classifier_hidden > 0 && e.classifier_epochs > 0 && e.classifier_batch_size > 0 && e.classifier_lr > 0.0, || "classifier settings must be positive".into())?;
        check(e.attention_step >= 1 && e.attention_step <= l.steps, || format!("eval.attention_step must be in 1..={}", l.steps))?;
        check(e.omegas.iter().all(|&w| w >= 0.0), || "eval.omegas must be nonnegative".into())?;
        Ok(())
    }

    pub fn vae_config(&self, bands: usize) -> VaeConfig {
        VaeConfig { bands, hidden: self.vae.hidden, lambda_kl: self.vae.lambda_kl, lambda_adv: self.vae.lambda_adv }
    }

    pub fn vae_train_config(&self) -> VaeTrainConfig {
        VaeTrainConfig { epochs: self.vae.epochs, batch_size: self.vae.batch_size, lr: self.vae.lr, steps_per_epoch: self.vae.steps_per_epoch, seed: self.seed }
    }

    pub fn ldm_config(&self, vocab_size: usize) -> LdmConfig {
        let l = &self.ldm;
        LdmConfig {
            side: self.split.patch_side,
            dim: l.dim,
            heads: l.heads,
            blocks: l.blocks,
            text_layers: l.text_layers,
            vocab_size,
            steps: l.steps,
            beta_min: l.beta_min,
            beta_max: l.beta_max,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let l = &self.ldm;
        TrainConfig {
            epochs: l.epochs,
            batch_size: l.batch_size,
            unlabeled_batch_size: l.unlabeled_batch_size,
            lr: l.lr,
            weight_decay: l.weight_decay,
            ema_alpha: l.ema_alpha,
            cond_drop_prob: l.cond_drop_prob,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn classifier_config(&self, seed: u64) -> ClassifierConfig {
        let e = &self.eval;
        ClassifierConfig { hidden: e.classifier_hidden, epochs: e.classifier_epochs, batch_size: e.classifier_batch_size, lr: e.classifier_lr, seed }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out.join(name)
    }
}
