//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasim::{DEFAULT_CLOUD_SIZE, SCENE_FRAMES};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant, MSI_BANDS, SAR_BANDS};
use crate::objectives::LossConfig;
use crate::trainer::{Experiment, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_samples: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub clouds: usize,
    pub cloud_size: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: 42, n_samples: 20, height: 60, width: 60, clouds: 20, cloud_size: DEFAULT_CLOUD_SIZE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    /// Temporal span; implied by the variant and only checked when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    pub k_s: usize,
    pub d_e: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub use_mask_channel: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let r = ModelConfig::reference(Variant::SmtsVivit);
        ModelSection {
            variant: Variant::SmtsVivit,
            t: None,
            k_s: r.patch,
            d_e: r.embed_dim,
            depth: r.depth,
            heads: r.heads,
            ff_dim: r.ff_dim,
            use_mask_channel: r.use_mask_channel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let variant = self.model.variant;
        let span = variant.temporal_span(SCENE_FRAMES);
        if let Some(t) = self.model.t {
            if t != span {
                return Err(Error::config(format!("model.t = {t} contradicts variant {variant}, which implies t = {span}")));
            }
        }
        let cfg = ModelConfig {
            frames: SCENE_FRAMES,
            msi_channels: MSI_BANDS,
            sar_channels: if variant.uses_sar() { SAR_BANDS } else { 0 },
            use_mask_channel: self.model.use_mask_channel,
            temporal_span: span,
            patch: self.model.k_s,
            embed_dim: self.model.d_e,
            depth: self.model.depth,
            heads: self.model.heads,
            ff_dim: self.model.ff_dim,
            height: self.data.height,
            width: self.data.width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn experiment(&self) -> Result<Experiment> {
        let e = Experiment {
            model: self.model_config()?,
            train: self.train.clone(),
            loss: self.loss.clone(),
            clouds: self.data.clouds,
            cloud_size: self.data.cloud_size,
        };
        e.validate()?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_documents() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.loss.scales, vec![1.0, 0.5, 0.25]);
        assert_eq!(c.model.k_s, 5);
        let c = RunConfig::from_json(r#"{"data": {"clouds": 30}, "model": {"variant": "mts-vit"}}"#).unwrap();
        assert_eq!(c.data.clouds, 30);
        let m = c.model_config().unwrap();
        assert_eq!((m.temporal_span, m.sar_channels), (6, 0));
    }

    #[test]
    fn unknown_keys_and_contradictions_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#), Err(Error::Config(_))));
        let c = RunConfig::from_json(r#"{"model": {"variant": "smts-vivit", "t": 6}}"#).unwrap();
        assert!(matches!(c.model_config(), Err(Error::Config(_))));
        let c = RunConfig::from_json(r#"{"model": {"variant": "smts-vivit", "t": 2}}"#).unwrap();
        assert_eq!(c.model_config().unwrap().sar_channels, 2);
    }
}
