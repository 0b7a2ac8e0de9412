//! Pipeline configuration: every tunable with its default, as JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coarse::CoarseFitConfig;
use crate::error::{Error, Result};
use crate::makeup::ExtractionConfig;
use crate::refine::RefineConfig;
use crate::texture::DEFAULT_FILL_ITERS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub complete: bool,
    pub refine: bool,
    pub extract: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            complete: true,
            refine: true,
            extract: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    pub iterations: usize,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            iterations: DEFAULT_FILL_ITERS,
        }
    }
}

/// Fit of the model's albedo subspace to a refined albedo, used as the
/// bare-skin prior for extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlbedoPriorConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for AlbedoPriorConfig {
    fn default() -> Self {
        AlbedoPriorConfig {
            iterations: 400,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub components: usize,
    pub scale: f64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig {
            components: 4,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub model: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Texture resolution of the synthetic scene and of refinement.
    pub resolution: usize,
    pub stages: StageToggles,
    pub coarse: CoarseFitConfig,
    pub completion: CompletionConfig,
    pub refine: RefineConfig,
    pub albedo_prior: AlbedoPriorConfig,
    pub extract: ExtractionConfig,
    pub pca: PcaConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            resolution: 128,
            stages: StageToggles::default(),
            coarse: CoarseFitConfig::default(),
            completion: CompletionConfig::default(),
            refine: RefineConfig::default(),
            albedo_prior: AlbedoPriorConfig::default(),
            extract: ExtractionConfig::default(),
            pca: PcaConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        if self.resolution < 8 {
            return Err(Error::Config("resolution must be at least 8".into()));
        }
        if self.completion.iterations == 0 {
            return Err(Error::Config("completion.iterations must be > 0".into()));
        }
        if !(self.albedo_prior.lr.is_finite() && self.albedo_prior.lr > 0.0) {
            return Err(Error::Config("albedo_prior.lr must be > 0".into()));
        }
        if !self.pca.scale.is_finite() {
            return Err(Error::Config("pca.scale must be finite".into()));
        }
        self.coarse.validate().map_err(wrap)?;
        self.refine.validate().map_err(wrap)?;
        self.extract.validate().map_err(wrap)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
