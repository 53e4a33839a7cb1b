use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dgde::Selection;
use crate::error::{Error, Result};
use crate::fusion::UncertaintyConfig;
use crate::geometry::Camera;
use crate::gmw::{EncoderSizes, GmwConfig};
use crate::nn::AdamWConfig;
use crate::synth::{make_template, Dims, NoiseModel, ObjectTemplate, PoseRanges, TemplateKind};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Everything a command needs. Serialized as TOML; every field has a
/// default so a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Checkpoints, logs and reports go here.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub selection: Selection,
    pub model: GmwConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub uncertainty: UncertaintyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            scene: SceneConfig::default(),
            selection: Selection::default(),
            model: GmwConfig {
                encoder: EncoderSizes {
                    layers: 2,
                    hidden: 32,
                    d_out: 32,
                },
                ..GmwConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            uncertainty: UncertaintyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `train.jsonl` and `val.jsonl`.
    pub dir: PathBuf,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train_count: 8000,
            val_count: 2000,
        }
    }
}

impl DataConfig {
    pub fn train_path(&self) -> PathBuf {
        self.dir.join("train.jsonl")
    }

    pub fn val_path(&self) -> PathBuf {
        self.dir.join("val.jsonl")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub template: TemplateKind,
    /// Surface keypoints on top of the 10 box keypoints.
    pub n_extra: usize,
    pub dims: Dims,
    pub camera: Camera,
    pub noise: NoiseModel,
    pub pose: PoseRanges,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            template: TemplateKind::CarLike,
            n_extra: 6,
            dims: Dims::default(),
            camera: Camera::kitti_like(),
            noise: NoiseModel::default(),
            pose: PoseRanges::default(),
        }
    }
}

impl SceneConfig {
    pub fn template(&self, seed: u64) -> Result<ObjectTemplate> {
        make_template(self.template, self.n_extra, self.dims, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Objects per optimizer step.
    pub batch_size: usize,
    /// Epochs on the classification loss alone.
    pub cls_epochs: usize,
    /// Epochs on `cls + beta * reg` that follow.
    pub joint_epochs: usize,
    /// Weight of the regression term in the second phase.
    pub beta: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            cls_epochs: 5,
            joint_epochs: 5,
            beta: 100.0,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Gmw,
    Uniform,
    Uncertainty,
    InverseDenominator,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Gmw => "gmw",
            Strategy::Uniform => "uniform",
            Strategy::Uncertainty => "uncertainty",
            Strategy::InverseDenominator => "inverse_denominator",
        }
    }

    pub fn needs_checkpoint(&self) -> bool {
        matches!(self, Strategy::Gmw | Strategy::Uncertainty)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmw" => Ok(Strategy::Gmw),
            "uniform" => Ok(Strategy::Uniform),
            "uncertainty" => Ok(Strategy::Uncertainty),
            "inverse_denominator" => Ok(Strategy::InverseDenominator),
            _ => Err(Error::InvalidConfig(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllEdges {
    All,
}

/// How many candidates an ablation run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeBudget {
    Top(usize),
    All(AllEdges),
}

impl EdgeBudget {
    pub const ALL: EdgeBudget = EdgeBudget::All(AllEdges::All);

    pub fn limit(&self) -> usize {
        match self {
            EdgeBudget::Top(k) => *k,
            EdgeBudget::All(_) => usize::MAX,
        }
    }
}

impl fmt::Display for EdgeBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeBudget::Top(k) => write!(f, "{k}"),
            EdgeBudget::All(_) => f.write_str("all"),
        }
    }
}

impl FromStr for EdgeBudget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(EdgeBudget::ALL);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(EdgeBudget::Top(k)),
            _ => Err(Error::InvalidConfig(format!("edge budget must be a positive integer or `all`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub strategy: Strategy,
    /// Defaults to `<output_dir>/checkpoint.json` (or
    /// `uncertainty_checkpoint.json` for the uncertainty strategy).
    pub checkpoint: Option<PathBuf>,
    /// Width of the error histogram bins in meters.
    pub hist_bin_width: f64,
    /// Bins before the overflow bin.
    pub hist_bins: usize,
    pub ablation_ks: Vec<EdgeBudget>,
    /// Log-spaced denominator bins for the denominator histogram.
    pub denom_bins: usize,
    pub denom_range: (f64, f64),
    /// A candidate counts as good below this absolute depth error (m).
    pub good_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Gmw,
            checkpoint: None,
            hist_bin_width: 0.25,
            hist_bins: 40,
            ablation_ks: vec![EdgeBudget::Top(50), EdgeBudget::Top(500), EdgeBudget::Top(1500), EdgeBudget::ALL],
            denom_bins: 20,
            denom_range: (1e-4, 1.0),
            good_threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scene.camera.validate()?;
        self.scene.noise.validate()?;
        self.model.validate()?;
        let t = &self.train;
        if !(t.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", t.beta)));
        }
        if t.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(t.optimizer.lr > 0.0) || !(t.optimizer.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad optimizer settings {:?}", t.optimizer)));
        }
        if !(self.selection.tau >= 0.0) || self.selection.k == 0 {
            return Err(Error::InvalidConfig(format!("bad selection {:?}", self.selection)));
        }
        let e = &self.eval;
        if !(e.hist_bin_width > 0.0) || e.hist_bins == 0 {
            return Err(Error::InvalidConfig("histogram needs a positive bin width and count".into()));
        }
        if e.ablation_ks.is_empty() || e.ablation_ks.contains(&EdgeBudget::Top(0)) {
            return Err(Error::InvalidConfig("ablation_ks must be nonempty and positive".into()));
        }
        let (lo, hi) = e.denom_range;
        if e.denom_bins == 0 || !(lo > 0.0 && hi > lo) {
            return Err(Error::InvalidConfig(format!("bad denominator binning {lo}..{hi} x {}", e.denom_bins)));
        }
        Ok(())
    }

    /// Seed for one independent random stream of a run.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        crate::synth::derive_seed(self.seed, stream as u64)
    }

    pub fn checkpoint_path(&self, strategy: Strategy) -> PathBuf {
        if let Some(p) = &self.eval.checkpoint {
            return p.clone();
        }
        match strategy {
            Strategy::Uncertainty => self.output_dir.join("uncertainty_checkpoint.json"),
            _ => self.output_dir.join("checkpoint.json"),
        }
    }
}

/// Random streams of a run; each gets its own derived seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Template = 1,
    TrainSplit = 2,
    ValSplit = 3,
    ModelInit = 4,
    Shuffle = 5,
}
