//! Experiment configuration: a TOML document with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::SplitKind;
use crate::error::{Error, Result};
use crate::metrics::AccWeighting;
use crate::nn::{Backbone, HeadArch, Init, ModelConfig, TrainConfig};
use crate::ratemap::Reduction;
use crate::spacemask::{MaskScheme, SlitAxis};
use crate::waveattack::{SearchGrid, Waveform};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generate random stroke skeletons.
    Synthetic,
    /// Load label images from `<dir>/train` and `<dir>/test`.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic sample counts (ignored for directory sources).
    pub train_count: usize,
    pub test_count: usize,
    /// `(height, width)` of the network input.
    pub size: (usize, usize),
    /// Number of mask regions per direction.
    pub regions: usize,
    pub scheme: MaskScheme,
    /// Add rotated copies of every training sample.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train_count: 32,
            test_count: 16,
            size: (64, 64),
            regions: 4,
            scheme: MaskScheme::Xy,
            augment: true,
        }
    }
}

/// Architecture settings; class counts and input size follow from the data
/// section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: Backbone,
    pub head_arch: HeadArch,
    pub init: Init,
    pub width: usize,
    pub decoder_channels: usize,
    pub aspp_rates: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: Backbone::Tiny,
            head_arch: HeadArch::Fcn8Like,
            init: Init::Random,
            width: 8,
            decoder_channels: 16,
            aspp_rates: vec![1, 2, 4, 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub slit_length: usize,
    pub separation: usize,
    pub axis: SlitAxis,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            slit_length: 16,
            separation: 8,
            axis: SlitAxis::Vertical,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Activation the ratemaps and waviness are computed on.
    pub layer: String,
    /// Profile reductions, the first one feeds the aggregate waviness.
    pub reductions: Vec<Reduction>,
    pub waviness_threshold: f64,
    /// Aggregate waviness above this marks a wave pattern.
    pub wave_pattern_threshold: f64,
    pub ratemap_split: SplitKind,
    pub acc_weighting: AccWeighting,
    pub probe: ProbeConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            layer: crate::nn::LAST_HIDDEN.into(),
            reductions: vec![Reduction::Mean, Reduction::CenterLine],
            waviness_threshold: 0.1,
            wave_pattern_threshold: 0.3,
            ratemap_split: SplitKind::Test,
            acc_weighting: AccWeighting::AsPrinted,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub grid: SearchGrid,
    /// Grating amplitude on the 0-255 intensity scale.
    pub epsilon: f64,
    pub waveform: Waveform,
    /// Use at most this many test images.
    pub max_images: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            grid: SearchGrid::default(),
            epsilon: 8.0,
            waveform: Waveform::Square,
            max_images: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Drives data synthesis and weight initialisation; shuffling uses
    /// `train.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            analysis: AnalysisConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| parse_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::ConfigParse { key, message } => Error::ConfigParse {
                key,
                message: format!("{} ({message})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot serialise config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Applies `key = value` overrides, where `key` is dotted (`train.lr`)
    /// and `value` is a TOML literal; bare words are taken as strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self)
            .map_err(|e| Error::InvalidConfig(format!("cannot serialise config: {e}")))?;
        for (key, raw) in overrides {
            set_dotted(&mut doc, key, parse_literal(raw))?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| parse_error(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train_count == 0 || self.data.test_count == 0 {
            return Err(Error::InvalidConfig("data.train_count and data.test_count must be positive".into()));
        }
        if self.analysis.reductions.is_empty() {
            return Err(Error::InvalidConfig("analysis.reductions must not be empty".into()));
        }
        if self.attack.max_images == 0 {
            return Err(Error::InvalidConfig("attack.max_images must be positive".into()));
        }
        self.train.validate()?;
        self.model_config()?.validate()
    }

    /// Highest position class of the configured masks.
    pub fn max_class(&self) -> usize {
        self.data.scheme.max_class(self.data.regions)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let classes = self.max_class() + 1;
        Ok(ModelConfig {
            backbone: self.model.backbone,
            head_arch: self.model.head_arch,
            num_classes_h: classes,
            num_classes_v: classes,
            input_size: self.data.size,
            init: self.model.init.clone(),
            width: self.model.width,
            decoder_channels: self.model.decoder_channels,
            aspp_rates: self.model.aspp_rates.clone(),
            init_seed: self.seed,
        })
    }

    /// First eight hex digits of the SHA-256 of the canonical TOML form,
    /// ignoring where the outputs go.
    pub fn short_hash(&self) -> Result<String> {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let digest = Sha256::digest(canon.to_toml()?.as_bytes());
        Ok(digest[..4].iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn parse_error(e: &toml::de::Error) -> Error {
    let message = e.message().to_string();
    let key = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into());
    let location = e
        .span()
        .map(|s| format!(" at bytes {}..{}", s.start, s.end))
        .unwrap_or_default();
    Error::ConfigParse {
        key,
        message: format!("{message}{location}"),
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_dotted(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let unknown = |msg: &str| Error::ConfigParse {
        key: key.to_string(),
        message: msg.to_string(),
    };
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| unknown("path goes through a non-table value"))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(unknown("unknown configuration key"));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.get_mut(*part).ok_or_else(|| unknown("unknown configuration section"))?;
    }
    Err(unknown("empty key"))
}

/// Splits trailing `--a.b value` / `--a.b=value` arguments into pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg.strip_prefix("--").ok_or_else(|| Error::ConfigParse {
            key: arg.clone(),
            message: "overrides look like `--section.key value`".into(),
        })?;
        match body.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::ConfigParse {
                    key: body.to_string(),
                    message: "override is missing its value".into(),
                })?;
                out.push((body.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.init = Init::ExternalWeights("weights/vgg.safetensors".into());
        cfg.data.source = DataSource::Directory("data/sk".into());
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("[train]\nlrr = 0.1\n").unwrap_err();
        match err {
            Error::ConfigParse { key, message } => {
                assert_eq!(key, "lrr");
                assert!(message.contains("bytes"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_typed_values() {
        let args: Vec<String> = ["--train.lr", "0.05", "--data.scheme=xy_symmetric", "--model.backbone", "vgg16_like"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let pairs = parse_override_args(&args).unwrap();
        let mut base = ExperimentConfig::default();
        base.data.size = (64, 64);
        let cfg = base.with_overrides(&pairs).unwrap();
        assert_eq!(cfg.train.lr, 0.05);
        assert_eq!(cfg.data.scheme, MaskScheme::XySymmetric);
        assert_eq!(cfg.model.backbone, Backbone::Vgg16Like);
        let err = base.with_overrides(&[("train.nope".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, Error::ConfigParse { key, .. } if key == "train.nope"));
    }

    #[test]
    fn class_count_follows_scheme() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.model_config().unwrap().num_classes_h, 5);
        cfg.data.scheme = MaskScheme::XySymmetric;
        assert_eq!(cfg.model_config().unwrap().num_classes_v, 3);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.short_hash().unwrap(), b.short_hash().unwrap());
        b.seed = 1;
        assert_ne!(a.short_hash().unwrap(), b.short_hash().unwrap());
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [
            include_str!("../../../../configs/desk.toml"),
            include_str!("../../../../configs/full.toml"),
        ] {
            ExperimentConfig::from_toml(text).unwrap().validate().unwrap();
        }
    }
}
