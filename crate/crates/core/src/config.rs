//! Run configuration: one TOML file with a section per module. Unknown keys
//! are rejected everywhere.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::geometry::SceneBounds;
use crate::instance::InstanceConfig;
use crate::losses::LossWeights;
use crate::mesh::GridConfig;
use crate::sampling::SamplingConfig;
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub g_min: f64,
    pub g_max: f64,
    /// Semantic classes `C`.
    pub classes: usize,
    /// Labels dropped from every frame before mapping.
    pub dynamic_classes: BTreeSet<u32>,
    /// Neighborhood size for normal estimation.
    pub normal_neighbors: usize,
    /// Optional palette file (one `r g b` line per class).
    pub palette: Option<PathBuf>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            g_min: -100.0,
            g_max: 100.0,
            classes: 3,
            dynamic_classes: BTreeSet::new(),
            normal_neighbors: 16,
            palette: None,
        }
    }
}

impl SceneConfig {
    pub fn bounds(&self) -> Result<SceneBounds> {
        SceneBounds::new(self.g_min, self.g_max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of `NNNNNN.xyzl` frames.
    pub frames: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    pub boxes: Option<PathBuf>,
    /// Output directory for logs, checkpoints and reports.
    pub run_dir: Option<PathBuf>,
    pub prior: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub field: FieldConfig,
    pub sampling: SamplingConfig,
    pub loss: LossWeights,
    pub trainer: TrainerConfig,
    pub grid: GridConfig,
    pub instance: InstanceConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.bounds()?;
        if self.scene.classes == 0 {
            return Err(Error::param("scene.classes must be >= 1"));
        }
        if self.scene.normal_neighbors < 3 {
            return Err(Error::param("scene.normal_neighbors must be >= 3"));
        }
        self.field.validate()?;
        self.sampling.validate()?;
        self.loss.validate()?;
        self.trainer.validate()?;
        self.instance.validate()?;
        if self.grid.resolution < 2 {
            return Err(Error::param("grid.resolution must be >= 2"));
        }
        Ok(())
    }

    /// Parses and validates; problems surface as config errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::input(path, e.to_string()))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form (sorted keys), hex-encoded.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Whether a config text sets `seed` explicitly.
pub fn toml_sets_seed(text: &str) -> bool {
    text.parse::<toml::Table>()
        .map(|t| t.contains_key("seed"))
        .unwrap_or(false)
}
