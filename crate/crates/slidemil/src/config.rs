//! Run configuration: TOML file with CLI overrides, validation, and the
//! config hash embedded in every stage output so artifacts from
//! incompatible runs cannot be mixed silently.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentSpec, DEFAULT_FILL};
use crate::clinical::FeatureSelection;
use crate::error::{Error, Result};
use crate::eval::Aggregation;
use crate::milnet::{FeaturizerKind, MilConfig};
use crate::seed::hash_hex;
use crate::train::TrainConfig;

/// Pipeline variant: image-only with tumor masks, image+clinical with
/// tumor masks, or image+clinical over the whole slide (no masks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "dlcnb")]
    Dlcnb,
    #[serde(rename = "dlcnbc")]
    Dlcnbc,
    #[serde(rename = "dlcnbc-ws")]
    DlcnbcWs,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Dlcnb => "dlcnb",
            Mode::Dlcnbc => "dlcnbc",
            Mode::DlcnbcWs => "dlcnbc-ws",
        }
    }

    pub fn uses_masks(&self) -> bool {
        !matches!(self, Mode::DlcnbcWs)
    }

    pub fn uses_clinical(&self) -> bool {
        !matches!(self, Mode::Dlcnb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multiclass,
}

impl Task {
    pub fn classes(&self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Multiclass => 3,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub slides: PathBuf,
    /// Tumor masks directory; forbidden in dlcnbc-ws mode.
    pub masks: Option<PathBuf>,
    pub clinical: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            slides: "data/slides".into(),
            masks: None,
            clinical: "data/clinical.csv".into(),
            out: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub tile_size: usize,
    pub stride: usize,
    pub entropy_threshold: f64,
    pub mask_coverage_min: f64,
    /// Featurizer input side length after bilinear resize.
    pub resize_to: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            tile_size: 256,
            stride: 256,
            entropy_threshold: 5.0,
            mask_coverage_min: 0.5,
            resize_to: 224,
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BagsConfig {
    pub n_instances: usize,
    pub bags_per_slide: usize,
}

impl Default for BagsConfig {
    fn default() -> Self {
        BagsConfig {
            n_instances: 10,
            bags_per_slide: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub conv1_channels: usize,
    pub feature_dim: usize,
    pub attn_hidden: usize,
    pub gated: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv1_channels: 8,
            feature_dim: 32,
            attn_hidden: 16,
            gated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Slide aggregation rule over per-bag probabilities.
    pub aggregation: AggregationConfig,
    /// Decision threshold for the binary confusion metrics.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationConfig {
    Mean,
    Max,
    Vote,
}

impl From<AggregationConfig> for Aggregation {
    fn from(a: AggregationConfig) -> Aggregation {
        match a {
            AggregationConfig::Mean => Aggregation::Mean,
            AggregationConfig::Max => Aggregation::Max,
            AggregationConfig::Vote => Aggregation::Vote,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            aggregation: AggregationConfig::Mean,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClinicalFeatures {
    Selected,
    All,
}

impl From<ClinicalFeatures> for FeatureSelection {
    fn from(c: ClinicalFeatures) -> FeatureSelection {
        match c {
            ClinicalFeatures::Selected => FeatureSelection::Selected,
            ClinicalFeatures::All => FeatureSelection::All,
        }
    }
}

/// The full run configuration. Every stage output embeds
/// [`RunConfig::hash`], computed over everything except paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Mode,
    pub task: Task,
    pub seed: u64,
    pub clinical_features: ClinicalFeatures,
    /// Augmentation recipe, e.g. `["rotation(10)", "vflip(0.5)"]`,
    /// applied to training-cohort patches only.
    pub augment: Vec<String>,
    pub paths: PathsConfig,
    pub tiling: TilingConfig,
    pub bags: BagsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::DlcnbcWs,
            task: Task::Binary,
            seed: 42,
            clinical_features: ClinicalFeatures::Selected,
            augment: Vec::new(),
            paths: PathsConfig::default(),
            tiling: TilingConfig::default(),
            bags: BagsConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// The hash covers everything that shapes the data and the model;
/// paths are excluded so artifacts can be relocated.
#[derive(Serialize)]
struct HashedView<'a> {
    mode: Mode,
    task: Task,
    seed: u64,
    clinical_features: ClinicalFeatures,
    augment: &'a [String],
    tiling: &'a TilingConfig,
    bags: &'a BagsConfig,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    eval: &'a EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&raw)
    }

    pub fn from_toml_str(raw: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(raw).map_err(|e| Error::Config(format!("bad config file: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_masks() && self.paths.masks.is_none() {
            return Err(Error::Config(format!(
                "mode {} requires a masks directory",
                self.mode.as_str()
            )));
        }
        if !self.mode.uses_masks() && self.paths.masks.is_some() {
            return Err(Error::Config(
                "mode dlcnbc-ws samples the whole slide and forbids a masks directory".into(),
            ));
        }
        if self.tiling.tile_size == 0 || self.tiling.stride == 0 {
            return Err(Error::Config("tile_size and stride must be >= 1".into()));
        }
        if !(0.0..=8.0).contains(&self.tiling.entropy_threshold) {
            return Err(Error::Config("entropy_threshold must be in [0,8]".into()));
        }
        if !(0.0..=1.0).contains(&self.tiling.mask_coverage_min) {
            return Err(Error::Config("mask_coverage_min must be in [0,1]".into()));
        }
        if self.tiling.resize_to < 2 {
            return Err(Error::Config("resize_to must be >= 2".into()));
        }
        if self.tiling.norm_std.contains(&0.0) {
            return Err(Error::Config("norm_std components must be nonzero".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config("eval threshold must be in [0,1]".into()));
        }
        if self.bags.n_instances == 0 || self.bags.bags_per_slide == 0 {
            return Err(Error::Config("n_instances and bags_per_slide must be >= 1".into()));
        }
        self.augment_spec()?;
        self.train.validate()?;
        MilConfig {
            input_size: self.tiling.resize_to,
            conv1_channels: self.model.conv1_channels,
            feature_dim: self.model.feature_dim,
            attn_hidden: self.model.attn_hidden,
            clinical_dim: 0,
            classes: self.task.classes(),
            gated: self.model.gated,
            featurizer: FeaturizerKind::Conv,
        }
        .validate()
    }

    pub fn augment_spec(&self) -> Result<AugmentSpec> {
        AugmentSpec::parse(&self.augment, DEFAULT_FILL)
    }

    pub fn feature_selection(&self) -> FeatureSelection {
        self.clinical_features.into()
    }

    /// 16-hex-digit hash over the path-independent configuration.
    pub fn hash(&self) -> String {
        let view = HashedView {
            mode: self.mode,
            task: self.task,
            seed: self.seed,
            clinical_features: self.clinical_features,
            augment: &self.augment,
            tiling: &self.tiling,
            bags: &self.bags,
            model: &self.model,
            train: &self.train,
            eval: &self.eval,
        };
        hash_hex(&serde_json::to_string(&view).expect("config serializes"))
    }

    /// Network configuration for this run. `clinical_dim` is the encoded
    /// clinical length (0 in image-only mode), `precomputed` the feature
    /// dimension when external features replace the conv featurizer.
    pub fn mil_config(&self, clinical_dim: usize, precomputed: Option<usize>) -> MilConfig {
        MilConfig {
            input_size: self.tiling.resize_to,
            conv1_channels: self.model.conv1_channels,
            feature_dim: precomputed.unwrap_or(self.model.feature_dim),
            attn_hidden: self.model.attn_hidden,
            clinical_dim: if self.mode.uses_clinical() { clinical_dim } else { 0 },
            classes: self.task.classes(),
            gated: self.model.gated,
            featurizer: if precomputed.is_some() {
                FeaturizerKind::Precomputed
            } else {
                FeaturizerKind::Conv
            },
        }
    }
}
