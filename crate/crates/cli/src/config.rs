use std::path::{Path, PathBuf};

use headgrow::eval::ABLATION_FRACTIONS;
use headgrow::grow::PipelineConfig;
use headgrow::synth::HeadSceneOptions;
use headgrow::{Error, Result};
use serde::{Deserialize, Serialize};

/// Effective configuration of one run. Loaded from JSON (every field
/// optional), then overridden by command-line flags, and written next to
/// the run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    /// Clusters to reconstruct besides the frontal one; all when absent.
    pub clusters: Option<Vec<i32>>,
    pub fractions: Vec<f64>,
    pub synth: HeadSceneOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output: None,
            seed: 7,
            pipeline: PipelineConfig::default(),
            clusters: None,
            fractions: ABLATION_FRACTIONS.to_vec(),
            synth: HeadSceneOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::InvalidConfig(format!("ablation fraction {f} is not in (0, 1]")));
        }
        let s = &self.synth;
        if s.image_size.0 < 8 || s.image_size.1 < 8 {
            return Err(Error::InvalidConfig("synthetic images must be at least 8x8".into()));
        }
        if s.lights == 0 || s.poses.is_empty() {
            return Err(Error::InvalidConfig("synthetic scene needs a light and a pose".into()));
        }
        if !(s.fill > 0.0 && s.fill <= 1.0) {
            return Err(Error::InvalidConfig(format!("fill {} is not in (0, 1]", s.fill)));
        }
        if !(s.intensity > 0.0 && s.ambient >= 0.0 && s.albedo > 0.0 && s.albedo <= 1.0) {
            return Err(Error::InvalidConfig("light intensity and albedo must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no dataset given (--dataset)".into()))
    }

    pub fn output(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no output directory given (--out)".into()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
