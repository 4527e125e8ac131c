use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::cloud::DEFAULT_NORMAL_K;
use crate::ingest::IngestConfig;
use crate::odometry::OdometryParams;
use crate::posegraph::OptimizeParams;

/// Synthetic dataset written by the `synth` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            frames: 60,
            width: 320,
            height: 240,
        }
    }
}

/// Pipeline settings. Relative paths in a config file are resolved against
/// the directory containing the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub ingest: IngestConfig,
    pub output_dir: PathBuf,
    /// Frames per window.
    #[serde(rename = "N")]
    pub n: usize,
    pub voxel_fragment: f64,
    pub voxel_global: f64,
    pub icp_distance_coarse: f64,
    pub icp_distance_fine: f64,
    pub normal_k: usize,
    pub loop_closure_fragments: bool,
    pub odometry: OdometryParams,
    pub optimize: OptimizeParams,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ingest: IngestConfig::default(),
            output_dir: PathBuf::from("output"),
            n: 15,
            voxel_fragment: 0.01,
            voxel_global: 0.05,
            icp_distance_coarse: 0.15,
            icp_distance_fine: 0.05,
            normal_k: DEFAULT_NORMAL_K,
            loop_closure_fragments: false,
            odometry: OdometryParams::default(),
            optimize: OptimizeParams::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON config and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Io {
            stage: "config",
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.ingest.dataset_root = base.join(&cfg.ingest.dataset_root);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks value ranges; `N ≤ M` is checked once the frames are known.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.n < 2 {
            return bad(format!("N = {} must be >= 2", self.n));
        }
        for (name, v) in [
            ("voxel_fragment", self.voxel_fragment),
            ("voxel_global", self.voxel_global),
            ("icp_distance_coarse", self.icp_distance_coarse),
            ("icp_distance_fine", self.icp_distance_fine),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be > 0"));
            }
        }
        if self.normal_k < 3 {
            return bad(format!("normal_k = {} must be >= 3", self.normal_k));
        }
        self.ingest
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.odometry
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.optimize
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}
