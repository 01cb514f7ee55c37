//! Declarative run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use morphdet::{DetectConfig, SceneConfig, TrainConfig, UniverseConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, WithPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// Drives every generator and the trainer; overrides the nested seeds.
    pub seed: u64,
    /// Seeds swept by `experiment`.
    pub seeds: Vec<u64>,
    /// Exemplars per novel class used for morphing.
    pub shots: usize,
    /// Scenes per class in the held-out evaluation set (base and novel classes).
    pub test_scenes_per_class: usize,
    pub universe: UniverseConfig,
    pub scenes: SceneConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            shots: 5,
            test_scenes_per_class: 20,
            universe: UniverseConfig::default(),
            scenes: SceneConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate().map_err(|msg| CliError::Config { path: path.to_path_buf(), msg })?;
        Ok(cfg)
    }

    /// Loads `path`, or the defaults when absent.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.universe.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.shots == 0 {
            return Err("shots must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return Err("seeds must not be empty".into());
        }
        if self.test_scenes_per_class == 0 {
            return Err("test_scenes_per_class must be >= 1".into());
        }
        let d = &self.detect;
        if !(0.0..=1.0).contains(&d.nms_iou) || !d.score_threshold.is_finite() {
            return Err(format!("detect thresholds out of range: {d:?}"));
        }
        Ok(())
    }

    /// The configuration with `seed` pushed into every nested seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.universe.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}
