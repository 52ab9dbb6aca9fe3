use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lesion_core::data::{SamplerKind, WeightMode};
use lesion_core::nn::{Monitor, TrainConfig};
use lesion_core::{AugmentConfig, NUM_CLASSES};
use serde::{Deserialize, Serialize};

/// Every knob of a run in one flat JSON object. Keys missing from a config
/// file take the defaults below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Ground-truth CSV (`image,MEL,NV,...`).
    pub manifest: Option<PathBuf>,
    /// Image directory; defaults to the manifest's directory.
    pub image_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Stratified subsample of roughly this many rows, for smoke runs.
    pub limit: Option<usize>,
    pub val_frac: f64,

    pub resize_w: usize,
    pub resize_h: usize,
    pub center_crop: usize,
    pub random_crop: usize,
    pub brightness_delta: f64,
    pub flip_prob: f64,
    pub apply_color_constancy: bool,
    pub standardize: bool,

    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub sampler: SamplerKind,
    pub weight_mode: WeightMode,
    pub class_weight_multipliers: [f64; NUM_CLASSES],
    pub monitor: Monitor,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            manifest: None,
            image_dir: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            limit: None,
            val_frac: 0.2,
            resize_w: aug.resize_w,
            resize_h: aug.resize_h,
            center_crop: aug.center_crop,
            random_crop: aug.random_crop,
            brightness_delta: aug.brightness_delta,
            flip_prob: aug.flip_prob,
            apply_color_constancy: aug.apply_color_constancy,
            standardize: aug.standardize,
            lr0: train.lr0,
            plateau_factor: train.plateau_factor,
            plateau_patience: train.plateau_patience,
            max_epochs: train.max_epochs,
            batch_size: train.batch_size,
            sampler: train.sampler,
            weight_mode: train.weight_mode,
            class_weight_multipliers: train.class_weight_multipliers,
            monitor: train.monitor,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            resize_w: self.resize_w,
            resize_h: self.resize_h,
            center_crop: self.center_crop,
            random_crop: self.random_crop,
            brightness_delta: self.brightness_delta,
            flip_prob: self.flip_prob,
            apply_color_constancy: self.apply_color_constancy,
            standardize: self.standardize,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            sampler: self.sampler,
            weight_mode: self.weight_mode.clone(),
            class_weight_multipliers: self.class_weight_multipliers,
            seed: self.seed,
            monitor: self.monitor,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
        }
    }

    pub fn manifest(&self) -> Result<&Path> {
        match &self.manifest {
            Some(p) => Ok(p),
            None => bail!("no manifest given (use --manifest or the `manifest` config key)"),
        }
    }

    pub fn image_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.image_dir {
            return Ok(d.clone());
        }
        let m = self.manifest()?;
        Ok(m.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    /// Writes `config.json` into the output directory, creating it.
    pub fn echo(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        let path = self.out_dir.join("config.json");
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
