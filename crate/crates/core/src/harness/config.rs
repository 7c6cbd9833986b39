//! Experiment configuration: a TOML file whose sections mirror the library
//! configs, overridden by command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, PipelineMode, PseudoLabel};
use crate::error::{Error, Result};
use crate::selection::SelectionStrategy;
use crate::streamgen::StreamConfig;

use super::pretrain::PretrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Pretrained model, no adaptation.
    None,
    Single,
    PerVideo,
    Full,
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "single" => Ok(Self::Single),
            "pervideo" => Ok(Self::PerVideo),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected none, single, pervideo or full)"
            ))),
        }
    }
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Single => "single",
            Self::PerVideo => "pervideo",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            init_seed: 22,
        }
    }
}

/// Per-switch overrides applied on top of the mode preset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub aggregation: Option<bool>,
    pub local_aug: Option<bool>,
    pub two_stage: Option<bool>,
    pub pseudo_label: Option<PseudoLabel>,
    pub selection: Option<SelectionStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: usize,
    /// Arm names to run; empty runs every arm.
    pub arms: Vec<String>,
    pub thresholds_px: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            arms: Vec::new(),
            thresholds_px: vec![10.0, 15.0, 30.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: Option<PathBuf>,
    /// Defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<out>/streams.txt`.
    pub streams: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds model initialisation, pretraining and the adaptation run.
    pub seed: u64,
    pub mode: RunMode,
    pub switches: Switches,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub engine: EngineConfig,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 22,
            mode: RunMode::Full,
            switches: Switches::default(),
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            engine: EngineConfig::default(),
            ablate: AblateConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// One seed for everything, as `--seed` does.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.stream.seed = seed;
        self.model.init_seed = seed;
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.out_dir().join("model.ckpt"))
    }

    pub fn streams_path(&self) -> PathBuf {
        self.paths.streams.clone().unwrap_or_else(|| self.out_dir().join("streams.txt"))
    }

    /// Pipeline mode and engine settings that `mode` and `switches` resolve to.
    pub fn resolve(&self) -> (PipelineMode, EngineConfig) {
        resolve_mode(self.mode, &self.switches, &self.engine)
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.pretrain.validate()?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden needs at least one positive width".into()));
        }
        if self.ablate.seeds == 0 {
            return Err(Error::Config("ablate.seeds must be >= 1".into()));
        }
        self.engine.validate(crate::kinematics::SkeletonTemplate::default().joint_count())
    }
}

pub fn resolve_mode(mode: RunMode, switches: &Switches, engine: &EngineConfig) -> (PipelineMode, EngineConfig) {
    let mut engine = engine.clone();
    let mut pm = match mode {
        RunMode::None | RunMode::PerVideo => PipelineMode::per_video(),
        RunMode::Single => PipelineMode::single(),
        RunMode::Full => PipelineMode::full(),
    };
    if mode == RunMode::None {
        engine.two_stage.stage1_max_iters = 0;
        engine.two_stage.stage2_max_iters = 0;
    }
    if let Some(v) = switches.aggregation {
        pm.aggregation = v;
    }
    if let Some(v) = switches.local_aug {
        pm.local_aug = v;
    }
    if let Some(v) = switches.two_stage {
        pm.two_stage = v;
    }
    if let Some(v) = switches.pseudo_label {
        pm.pseudo_label = v;
    }
    if let Some(v) = switches.selection {
        pm.selection = v;
    }
    (pm, engine)
}
