//! Training configuration, parseable from TOML (see the README for the
//! file schema) with every field defaulted.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractorConfig;
use crate::data::GeneratorSpec;
use crate::losses::LossWeights;
use crate::metric::{BoxSpec, ContainmentTarget};
use crate::models::SimilarityKind;
use crate::{Error, Result};

/// Which model a run trains; prototype models carry their alignment-module
/// switches. Serialized as strings like `"vanilla"` or `"proto+cla+cia+pa"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ModelKind {
    Baseline,
    Vanilla,
    Proto { cla: bool, cia: bool, pa: bool },
}

impl ModelKind {
    pub fn proto_full() -> Self {
        ModelKind::Proto { cla: true, cia: true, pa: true }
    }

    pub fn is_proto(&self) -> bool {
        matches!(self, ModelKind::Proto { .. })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Baseline => write!(f, "baseline"),
            ModelKind::Vanilla => write!(f, "vanilla"),
            ModelKind::Proto { cla, cia, pa } => {
                write!(f, "proto")?;
                if *cla {
                    write!(f, "+cla")?;
                }
                if *cia {
                    write!(f, "+cia")?;
                }
                if *pa {
                    write!(f, "+pa")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let mut parts = lower.split('+');
        let base = parts.next().unwrap_or("");
        let mut kind = match base {
            "baseline" => ModelKind::Baseline,
            "vanilla" => ModelKind::Vanilla,
            "proto" => ModelKind::Proto { cla: false, cia: false, pa: false },
            other => {
                return Err(Error::Config(format!(
                    "unknown model kind '{other}' (expected baseline, vanilla or proto[+cla][+cia][+pa])"
                )))
            }
        };
        for m in parts {
            let ModelKind::Proto { cla, cia, pa } = &mut kind else {
                return Err(Error::Config(format!(
                    "modules are only valid on proto models, got '{s}'"
                )));
            };
            match m {
                "cla" => *cla = true,
                "cia" => *cia = true,
                "pa" => *pa = true,
                other => return Err(Error::Config(format!("unknown module '{other}'"))),
            }
        }
        Ok(kind)
    }
}

impl From<ModelKind> for String {
    fn from(k: ModelKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for ModelKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { spec: GeneratorSpec },
    Manifest { path: PathBuf },
    Cub {
        root: PathBuf,
        crop_to_bbox: bool,
        image_size: usize,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic { spec: GeneratorSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dataset: DatasetSource,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// M: prototype count (desk-scale default; the full-scale setting uses
    /// thousands).
    pub num_prototypes: usize,
    /// D: deep feature dimension; must equal the backbone's last width.
    pub feature_dim: usize,
    /// E: number of window scales in the cross-layer alignment loss.
    pub cla_levels: usize,
    /// N: prototypes averaged into a concept's localization map.
    pub top_n: usize,
    pub weights: LossWeights,
    pub similarity: SimilarityKind,
    pub backbone: FeatureExtractorConfig,
    pub box_spec: BoxSpec,
    pub target: ContainmentTarget,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::proto_full(),
            dataset: DatasetSource::default(),
            epochs: 18,
            warmup_epochs: 5,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            num_prototypes: 64,
            feature_dim: 64,
            cla_levels: 2,
            top_n: 10,
            weights: LossWeights::default(),
            similarity: SimilarityKind::Cosine,
            backbone: FeatureExtractorConfig::default(),
            box_spec: BoxSpec::default(),
            target: ContainmentTarget::CenterPoint,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.num_prototypes == 0 || self.top_n == 0 || self.top_n > self.num_prototypes {
            return Err(Error::Config(format!(
                "need 1 <= top_n ({}) <= num_prototypes ({})",
                self.top_n, self.num_prototypes
            )));
        }
        if self.cla_levels == 0 {
            return Err(Error::Config("cla_levels must be >= 1".into()));
        }
        self.backbone.validate()?;
        if self.feature_dim != self.backbone.deep_dim() {
            return Err(Error::Config(format!(
                "feature_dim {} must equal the backbone's last width {}",
                self.feature_dim,
                self.backbone.deep_dim()
            )));
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Serde(format!("config parse: {e}")))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(format!("config encode: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_kind_round_trips_through_strings() {
        for s in ["baseline", "vanilla", "proto", "proto+cla", "proto+cla+cia+pa", "proto+pa"] {
            let kind: ModelKind = s.parse().unwrap();
            assert_eq!(kind.to_string(), s);
        }
        assert!("vanilla+cla".parse::<ModelKind>().is_err());
        assert!("resnet".parse::<ModelKind>().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let config = TrainConfig {
            model: ModelKind::proto_full(),
            seed: 42,
            ..TrainConfig::default()
        };
        let text = config.to_toml().unwrap();
        let parsed = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let parsed = TrainConfig::from_toml("model = \"vanilla\"\nepochs = 3\n").unwrap();
        assert_eq!(parsed.model, ModelKind::Vanilla);
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.warmup_epochs, 5);
        assert_eq!(parsed.learning_rate, 1e-4);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = TrainConfig::default();
        c.warmup_epochs = 30;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.top_n = 1000;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.feature_dim = 32;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
