//! One declarative TOML file for every stage, with dotted-path overrides.
//!
//! ```toml
//! [init]
//! max_gaussians = 8000
//!
//! [train]
//! iterations = 2000
//! weights = { ssim = 0.2, mask = 0.1, depth = 0.05 }
//!
//! [mesh]
//! resolution = 128
//! ```
//!
//! Every key is optional; missing keys take their defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SceneSpec;
use crate::error::{Error, Result};
use crate::mesh::MeshConfig;
use crate::pipeline::{InitConfig, ReconstructConfig};
use crate::optim::TrainConfig;
use crate::relevance::DEFAULT_THRESHOLD;

/// Relevance masking settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceConfig {
    /// Mask threshold on the normalized relevance map.
    pub tau: f64,
    /// Apply a 3x3 blur before thresholding.
    pub blur: bool,
    /// Diffusion steps of the noise schedule.
    pub steps: usize,
    /// Noising step; `None` means `round(0.6 * steps)`.
    pub t: Option<usize>,
    pub image_guidance: f64,
    pub text_guidance: f64,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig {
            tau: DEFAULT_THRESHOLD,
            blur: false,
            steps: 1000,
            t: None,
            image_guidance: 1.5,
            text_guidance: 7.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneSpec,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub mesh: MeshConfig,
    pub relevance: RelevanceConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides in order. Values parse as TOML
    /// (`3`, `0.5`, `true`, `[1, 2, 3]`), falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("override '{item}' is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::InvalidInput(format!("override: {e}")))
    }

    /// The initialization and training sections.
    pub fn reconstruct(&self) -> ReconstructConfig {
        ReconstructConfig {
            init: self.init.clone(),
            train: self.train.clone(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::InvalidInput(format!("'{}' is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            // integers are accepted where floats are expected
            let value = match (table.get(*part), value) {
                (Some(toml::Value::Float(_)), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
                (_, v) => v,
            };
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::InvalidInput("empty override key".into()))
}
