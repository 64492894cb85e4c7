//! Run configuration: a single JSON document describing the dataset, model,
//! training, and inversion settings. The effective config is echoed into
//! every checkpoint.

use pae_core::data::{CorruptionKind, CorruptionSpec};
use pae_core::paired::{LossVariant, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub lsi: LsiSection,
    pub out_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Images held out from the end of the set for validation.
    #[serde(default)]
    pub val_count: usize,
    pub corruption: CorruptionConfig,
    /// Optional additive Gaussian noise on the observations, by target SNR.
    #[serde(default)]
    pub noise_db: Option<f64>,
    /// Also write the generated train/validation splits as IDX files.
    #[serde(default)]
    pub emit_data: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Procedural {
        count: usize,
        height: usize,
        width: usize,
    },
    Idx {
        images: String,
        #[serde(default)]
        labels: Option<String>,
        /// Keep only the first `count` images when set.
        #[serde(default)]
        count: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionConfig {
    #[serde(flatten)]
    pub kind: CorruptionKindConfig,
    /// Corruption stream seed; defaults to a value derived from the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorruptionKindConfig {
    PixelBernoulli { p: f64 },
    Blocks { count: usize, size: usize },
    GaussianSnr { target_db: f64 },
}

impl CorruptionConfig {
    pub fn to_spec(&self, run_seed: u64) -> CorruptionSpec {
        let kind = match self.kind {
            CorruptionKindConfig::PixelBernoulli { p } => CorruptionKind::PixelBernoulli { p },
            CorruptionKindConfig::Blocks { count, size } => CorruptionKind::Blocks { count, size },
            CorruptionKindConfig::GaussianSnr { target_db } => {
                CorruptionKind::GaussianSnr { target_db }
            }
        };
        CorruptionSpec {
            kind,
            seed: self.seed.unwrap_or(run_seed ^ 0x636f_7272),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    Mlp,
    Vpae,
    LatentMap,
}

fn default_widths() -> Vec<usize> {
    vec![256, 128]
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub latent_x: usize,
    pub latent_y: usize,
    #[serde(default = "default_widths")]
    pub encoder_widths: Vec<usize>,
    #[serde(default)]
    pub identity_maps: bool,
    /// Gaussian likelihood scale for the variational variants.
    #[serde(default = "one")]
    pub sigma: f64,
    /// Hidden width of the variational latent map.
    #[serde(default)]
    pub latent_map_hidden: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariantConfig {
    FullMappings,
    LatentMappings,
    Combined,
}

impl From<LossVariantConfig> for LossVariant {
    fn from(v: LossVariantConfig) -> LossVariant {
        match v {
            LossVariantConfig::FullMappings => LossVariant::FullMappings,
            LossVariantConfig::LatentMappings => LossVariant::LatentMappings,
            LossVariantConfig::Combined => LossVariant::Combined,
        }
    }
}

fn d_lr() -> f64 {
    1e-3
}

fn d_epochs() -> usize {
    20
}

fn d_batch() -> usize {
    64
}

fn d_variant() -> LossVariantConfig {
    LossVariantConfig::Combined
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "one")]
    pub alpha_x: f64,
    #[serde(default = "one")]
    pub alpha_y: f64,
    #[serde(default = "one")]
    pub alpha_m: f64,
    #[serde(default = "one")]
    pub alpha_m_dagger: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_variant")]
    pub loss_variant: LossVariantConfig,
    #[serde(default)]
    pub two_stage: bool,
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            alpha_x: 1.0,
            alpha_y: 1.0,
            alpha_m: 1.0,
            alpha_m_dagger: 1.0,
            lr: 1e-3,
            epochs: 20,
            batch_size: 64,
            loss_variant: LossVariantConfig::Combined,
            two_stage: false,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha_x: self.alpha_x,
            alpha_y: self.alpha_y,
            alpha_m: self.alpha_m,
            alpha_m_dagger: self.alpha_m_dagger,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            loss_variant: self.loss_variant.into(),
            two_stage: self.two_stage,
        }
    }
}

fn d_steps() -> usize {
    500
}

fn d_lsi_lr() -> f64 {
    1e-2
}

fn d_lsi_alpha() -> f64 {
    1e-2
}

fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsiSection {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_lsi_lr")]
    pub lr: f64,
    #[serde(default = "d_lsi_alpha")]
    pub alpha: f64,
    #[serde(default = "d_true")]
    pub warm_start: bool,
}

impl Default for LsiSection {
    fn default() -> LsiSection {
        LsiSection {
            steps: 500,
            lr: 1e-2,
            alpha: 1e-2,
            warm_start: true,
        }
    }
}

impl LsiSection {
    pub fn to_core(&self, warm: bool) -> pae_core::inversion::LsiConfig {
        pae_core::inversion::LsiConfig {
            steps: self.steps,
            lr: self.lr,
            alpha: self.alpha,
            warm_start: warm,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        match &self.dataset.source {
            DataSource::Procedural { count, height, width } => {
                if *count == 0 || *height == 0 || *width == 0 {
                    return Err("procedural source needs count, height, width >= 1".into());
                }
                if self.dataset.val_count >= *count {
                    return Err(format!(
                        "val_count {} must be smaller than count {count}",
                        self.dataset.val_count
                    ));
                }
            }
            DataSource::Idx { images, labels, .. } => {
                if !Path::new(images).exists() {
                    return Err(format!("idx images path not found: {images}"));
                }
                if let Some(l) = labels {
                    if !Path::new(l).exists() {
                        return Err(format!("idx labels path not found: {l}"));
                    }
                }
            }
        }
        match self.dataset.corruption.kind {
            CorruptionKindConfig::PixelBernoulli { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("corruption probability {p} outside [0, 1]"));
                }
            }
            CorruptionKindConfig::Blocks { size, .. } => {
                if size == 0 {
                    return Err("block size must be >= 1".into());
                }
            }
            CorruptionKindConfig::GaussianSnr { target_db } => {
                if !target_db.is_finite() {
                    return Err("target_db must be finite".into());
                }
            }
        }
        if self.model.latent_x == 0 || self.model.latent_y == 0 {
            return Err("latent dimensions must be >= 1".into());
        }
        if self.model.identity_maps && self.model.latent_x != self.model.latent_y {
            return Err("identity maps require latent_x == latent_y".into());
        }
        if self.model.sigma <= 0.0 {
            return Err("sigma must be positive".into());
        }
        if self.train.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if self.lsi.steps == 0 {
            return Err("lsi.steps must be >= 1".into());
        }
        if self.lsi.alpha < 0.0 {
            return Err("lsi.alpha must be nonnegative".into());
        }
        Ok(())
    }
}
