//! Pipeline configuration: a TOML document (or its JSON equivalent) with
//! every key optional and unknown keys rejected.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use vcaptcha_core::pseudolabel::{ClusterMethod, Polarity};
use vcaptcha_nn::{Arch, PnetClConfig, SegNetConfig, UnetClConfig};
use vcaptcha_pipeline::train::TrainConfig;

use crate::CliError;

/// Environment variable that replaces `paths.data_root`.
pub const HOME_ENV: &str = "VESSEL_CAPTCHA_HOME";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PolarityName {
    #[serde(alias = "bright_vessel")]
    Bright,
    #[serde(alias = "dark_vessel")]
    Dark,
}

impl From<PolarityName> for Polarity {
    fn from(p: PolarityName) -> Self {
        match p {
            PolarityName::Bright => Polarity::BrightVessel,
            PolarityName::Dark => Polarity::DarkVessel,
        }
    }
}

/// Where the classifier second opinion is applied to final masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    #[default]
    Off,
    On,
    /// Only volumes named in the low-quality list.
    LqOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SegArchName {
    #[default]
    Wnet,
    Unet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClsArchName {
    #[default]
    Pnet,
    Unet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_root: PathBuf,
    pub output_root: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            output_root: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterSection {
    pub arch: SegArchName,
    pub levels: usize,
    pub base_channels: usize,
    pub dropout: f32,
}

impl Default for SegmenterSection {
    fn default() -> Self {
        let d = SegNetConfig::default();
        Self {
            arch: SegArchName::Wnet,
            levels: d.levels,
            base_channels: d.base_channels,
            dropout: d.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub arch: ClsArchName,
    /// Per-branch filters of the dilated classifier.
    pub filters: usize,
    pub mid_channels: usize,
    pub hidden: usize,
    pub dropout: f32,
    /// Unet classifier only.
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let p = PnetClConfig::default();
        let u = UnetClConfig::default();
        Self {
            arch: ClsArchName::Pnet,
            filters: p.filters,
            mid_channels: p.mid_channels,
            hidden: p.hidden,
            dropout: p.dropout,
            levels: u.levels,
            base_channels: u.base_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Probability cut for segmentation masks.
    pub segment: f32,
    /// Classifier cut for auto-tagging and the second opinion. Unset means
    /// the checkpoint's calibrated value, falling back to 0.5.
    pub classifier: Option<f32>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            segment: 0.5,
            classifier: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub count: usize,
    /// Cube edge in voxels.
    pub shape: usize,
    pub noise_sigma: f64,
    pub target_fraction: f64,
    /// Probability of flipping each simulated tag.
    pub flip_prob: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            count: 20,
            shape: 64,
            noise_sigma: 20.0,
            target_fraction: 0.021,
            flip_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub polarity: PolarityName,
    pub cluster_method: ClusterMethod,
    /// Annotation and classifier patch size.
    pub patch_size: usize,
    /// Segmenter input size.
    pub seg_patch_size: usize,
    pub split_seed: u64,
    /// Seed for generation and training.
    pub seed: u64,
    pub filter: FilterMode,
    pub device: String,
    pub segmenter: SegmenterSection,
    pub classifier: ClassifierSection,
    pub train_seg: TrainConfig,
    pub train_cls: TrainConfig,
    pub thresholds: Thresholds,
    pub synth: SynthSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            polarity: PolarityName::Bright,
            cluster_method: ClusterMethod::Kmeans,
            patch_size: 32,
            seg_patch_size: 96,
            split_seed: 0,
            seed: 0,
            filter: FilterMode::Off,
            device: "cpu".into(),
            segmenter: SegmenterSection::default(),
            classifier: ClassifierSection::default(),
            train_seg: TrainConfig::default(),
            train_cls: TrainConfig::default(),
            thresholds: Thresholds::default(),
            synth: SynthSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingInput(format!("config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let (p, s) = (self.patch_size, self.seg_patch_size);
        if p == 0 || s == 0 {
            return Err(CliError::Config("patch sizes must be positive".into()));
        }
        if s < p || s % p != 0 {
            return Err(CliError::Config(format!(
                "segment patch size {s} must be a multiple of the annotation patch size {p}"
            )));
        }
        let in_unit = |t: f32| t > 0.0 && t < 1.0;
        if !in_unit(self.thresholds.segment) || !self.thresholds.classifier.is_none_or(in_unit) {
            return Err(CliError::Config("thresholds must lie in (0, 1)".into()));
        }
        if self.device != "cpu" {
            return Err(CliError::Config(format!(
                "device {:?} is not available; only \"cpu\" is supported",
                self.device
            )));
        }
        if let Arch::WnetSeg(c) | Arch::UnetSeg(c) = self.segmenter_arch() {
            c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        // the classifiers are small enough that building one is the check
        vcaptcha_nn::Model::build(self.classifier_arch(), 0).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn segmenter_arch(&self) -> Arch {
        let c = SegNetConfig {
            input_size: self.seg_patch_size,
            levels: self.segmenter.levels,
            base_channels: self.segmenter.base_channels,
            dropout: self.segmenter.dropout,
        };
        match self.segmenter.arch {
            SegArchName::Wnet => Arch::WnetSeg(c),
            SegArchName::Unet => Arch::UnetSeg(c),
        }
    }

    pub fn classifier_arch(&self) -> Arch {
        let c = &self.classifier;
        match c.arch {
            ClsArchName::Pnet => Arch::PnetCl(PnetClConfig {
                input_size: self.patch_size,
                filters: c.filters,
                mid_channels: c.mid_channels,
                hidden: c.hidden,
                dropout: c.dropout,
                ..Default::default()
            }),
            ClsArchName::Unet => Arch::UnetCl(UnetClConfig {
                input_size: self.patch_size,
                levels: c.levels,
                base_channels: c.base_channels,
                hidden: c.hidden,
                dropout: c.dropout,
            }),
        }
    }
}
