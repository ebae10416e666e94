//! Declarative TOML run configuration. Unknown keys are rejected, every
//! field is validated before any compute, and the resolved document is echoed
//! verbatim into the output directory so a run is reproducible from its
//! artifacts alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VidmaeError};
use crate::model::{ModelConfig, ReconVariant};
use crate::priors::RegionProviderKind;
use crate::sampler::MaskStrategy;
use crate::train::{FinetuneConfig, OptimSpec, PretrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus root: `<dir>/manifest.csv` plus one directory per video.
    pub dir: PathBuf,
    #[serde(default = "DataConfig::default_n_videos")]
    pub n_videos: usize,
    #[serde(default = "DataConfig::default_frames_per_video")]
    pub frames_per_video: usize,
    #[serde(default = "DataConfig::default_frame_hw")]
    pub frame_height: usize,
    #[serde(default = "DataConfig::default_frame_hw")]
    pub frame_width: usize,
    #[serde(default = "DataConfig::default_malignant_fraction")]
    pub malignant_fraction: f64,
    #[serde(default = "DataConfig::default_k_folds")]
    pub k_folds: usize,
}

impl DataConfig {
    fn default_n_videos() -> usize {
        40
    }
    fn default_frames_per_video() -> usize {
        64
    }
    fn default_frame_hw() -> usize {
        64
    }
    fn default_malignant_fraction() -> f64 {
        0.5
    }
    fn default_k_folds() -> usize {
        5
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.csv")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default = "PretrainSection::default_lr")]
    pub lr: f64,
    #[serde(default = "PretrainSection::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "PretrainSection::default_warmup_epochs")]
    pub warmup_epochs: usize,
    pub epochs: usize,
    #[serde(default = "PretrainSection::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "PretrainSection::default_sampler_lr")]
    pub sampler_lr: f64,
    #[serde(default = "PretrainSection::default_pi_value")]
    pub pi_value: f64,
    /// random_patch | frame | tube | focused
    #[serde(default = "PretrainSection::default_strategy")]
    pub strategy: String,
    /// ground_truth | file:<path> | saliency
    #[serde(default = "PretrainSection::default_provider")]
    pub provider: String,
    #[serde(default = "PretrainSection::default_recon")]
    pub recon: ReconVariant,
    #[serde(default = "PretrainSection::default_stride")]
    pub stride: usize,
    #[serde(default = "PretrainSection::default_clips_per_video")]
    pub clips_per_video: usize,
    #[serde(default = "PretrainSection::default_augment")]
    pub augment: bool,
}

impl PretrainSection {
    fn default_lr() -> f64 {
        1e-4
    }
    fn default_weight_decay() -> f64 {
        0.05
    }
    fn default_warmup_epochs() -> usize {
        3
    }
    fn default_batch_size() -> usize {
        4
    }
    fn default_sampler_lr() -> f64 {
        1e-4
    }
    fn default_pi_value() -> f64 {
        0.1
    }
    fn default_strategy() -> String {
        "focused".into()
    }
    fn default_provider() -> String {
        "ground_truth".into()
    }
    fn default_recon() -> ReconVariant {
        ReconVariant::Mse
    }
    fn default_stride() -> usize {
        4
    }
    fn default_clips_per_video() -> usize {
        1
    }
    fn default_augment() -> bool {
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(default = "FinetuneSection::default_lr")]
    pub lr: f64,
    #[serde(default = "FinetuneSection::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "FinetuneSection::default_layer_decay")]
    pub layer_decay: f64,
    #[serde(default = "FinetuneSection::default_warmup_epochs")]
    pub warmup_epochs: usize,
    pub epochs: usize,
    #[serde(default = "FinetuneSection::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "FinetuneSection::default_label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "FinetuneSection::default_stride")]
    pub stride: usize,
    #[serde(default = "FinetuneSection::default_clips_per_video")]
    pub clips_per_video: usize,
    #[serde(default)]
    pub augment: bool,
    /// Reuse one label-free pretraining across all folds during
    /// cross-validation.
    #[serde(default = "FinetuneSection::default_shared_pretrain")]
    pub shared_pretrain: bool,
}

impl FinetuneSection {
    fn default_lr() -> f64 {
        1e-5
    }
    fn default_weight_decay() -> f64 {
        0.05
    }
    fn default_layer_decay() -> f64 {
        0.75
    }
    fn default_warmup_epochs() -> usize {
        0
    }
    fn default_batch_size() -> usize {
        4
    }
    fn default_label_smoothing() -> f64 {
        0.1
    }
    fn default_stride() -> usize {
        3
    }
    fn default_clips_per_video() -> usize {
        5
    }
    fn default_shared_pretrain() -> bool {
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| VidmaeError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| VidmaeError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty()
            || self
                .run_name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return Err(VidmaeError::Config(format!(
                "run_name `{}` must be non-empty and [A-Za-z0-9_-]",
                self.run_name
            )));
        }
        self.pretrain_config()?.validate()?;
        self.finetune_config()?.validate()?;
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }

    /// Copy the config text verbatim into the run directory.
    pub fn echo_into(&self, source: &Path) -> Result<()> {
        let dir = self.run_dir();
        fs::create_dir_all(&dir).map_err(|e| VidmaeError::Io {
            path: dir.clone(),
            source: e,
        })?;
        let text = fs::read_to_string(source).map_err(|e| VidmaeError::Io {
            path: source.to_path_buf(),
            source: e,
        })?;
        let dest = dir.join("config.toml");
        fs::write(&dest, text).map_err(|e| VidmaeError::Io {
            path: dest,
            source: e,
        })
    }

    pub fn strategy(&self) -> Result<MaskStrategy> {
        MaskStrategy::parse(&self.pretrain.strategy)
    }

    pub fn provider(&self) -> Result<RegionProviderKind> {
        RegionProviderKind::parse(&self.pretrain.provider)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            model: self.model.clone(),
            optim: OptimSpec {
                lr: self.pretrain.lr,
                weight_decay: self.pretrain.weight_decay,
                layer_decay: 1.0,
                warmup_epochs: self.pretrain.warmup_epochs,
                epochs: self.pretrain.epochs,
                batch_size: self.pretrain.batch_size,
            },
            sampler_lr: self.pretrain.sampler_lr,
            strategy: self.strategy()?,
            provider: self.provider()?,
            pi_value: self.pretrain.pi_value,
            recon: self.pretrain.recon,
            stride: self.pretrain.stride,
            clips_per_video: self.pretrain.clips_per_video,
            augment: self.pretrain.augment,
            checkpoint_every: 0,
        })
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            model: self.model.clone(),
            optim: OptimSpec {
                lr: self.finetune.lr,
                weight_decay: self.finetune.weight_decay,
                layer_decay: self.finetune.layer_decay,
                warmup_epochs: self.finetune.warmup_epochs,
                epochs: self.finetune.epochs,
                batch_size: self.finetune.batch_size,
            },
            label_smoothing: self.finetune.label_smoothing,
            stride: self.finetune.stride,
            clips_per_video: self.finetune.clips_per_video,
            augment: self.finetune.augment,
        })
    }
}
