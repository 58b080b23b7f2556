//! Run configuration: one TOML file covering model, training, synthetic
//! scene, dataset and output settings. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset_io::{LearningMap, SceneOptions, SynthSceneConfig};
use crate::error::{io_err, Error, Result};
use crate::lidar_model::SensorIntrinsics;
use crate::neural_field::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Sequence directory (`velodyne/`, `labels/`, `poses.txt`, ...).
    pub dir: PathBuf,
    pub start: usize,
    pub count: usize,
    /// Learning map TOML; empty selects the built-in SemanticKITTI map.
    pub learning_map: PathBuf,
    /// Must match the sensor that produced the scans. The default matches
    /// the synthetic generator's default sensor.
    pub intrinsics: SensorIntrinsics,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/synth"),
            start: 0,
            count: 50,
            learning_map: PathBuf::new(),
            intrinsics: SynthSceneConfig::default().intrinsics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSceneConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

const REFERENCE_HEADER: &str = "\
# Reference configuration with every key at its default value.
# Any subset of keys may be given; omitted keys take these values.
# model.variant: grid_only | semantic_field | full
# model.render.opacity: standard (1 - exp(-sigma * delta)) | printed (1 - exp(-sigma))
# train.schedule: constant | cosine
# data.learning_map: empty for the built-in SemanticKITTI map
";

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Commented TOML of the defaults.
    pub fn reference_toml() -> String {
        let body = RunConfig::default().to_toml_string().expect("defaults serialize");
        format!("{REFERENCE_HEADER}\n{body}")
    }

    pub fn learning_map(&self) -> Result<LearningMap> {
        if self.data.learning_map.as_os_str().is_empty() {
            Ok(LearningMap::semantic_kitti())
        } else {
            LearningMap::load(&self.data.learning_map)
        }
    }

    pub fn scene_options(&self) -> Result<SceneOptions> {
        Ok(SceneOptions {
            intrinsics: self.data.intrinsics,
            learning_map: self.learning_map()?,
            bounds_expansion: self.model.bounds_expansion,
        })
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.intrinsics.validate()?;
        let lm = self.learning_map()?;
        self.synth.validate(&lm)?;
        if lm.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes is {} but the learning map has {} classes",
                self.model.num_classes, lm.num_classes
            )));
        }
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be positive".into()));
        }
        Ok(())
    }
}
