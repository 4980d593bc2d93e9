//! Run configuration: one TOML file plus `key=value` overrides, deserialized
//! strictly so that a misspelled key is reported by its dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::restoration::NetConfig;
use crate::trainer::TrainingConfig;

/// Where clean images come from. Without `clean_dir`, seeded procedural
/// scenes are generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub clean_dir: Option<PathBuf>,
    pub scene_count: usize,
    pub scene_size: usize,
    pub eval_dir: Option<PathBuf>,
    pub eval_count: usize,
    pub eval_size: usize,
    /// Degradations used by `eval`; defaults to the training mix.
    pub eval_specs: Option<Vec<DegradationSpec>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clean_dir: None,
            scene_count: 16,
            scene_size: 96,
            eval_dir: None,
            eval_count: 8,
            eval_size: 64,
            eval_specs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub images: usize,
    pub image_size: usize,
    /// Noise levels on the 8-bit scale; at least two distinct values.
    pub sigmas: Vec<f64>,
    /// Images whose deep-tap PCA projections are written as PNGs.
    pub pca_images: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            images: 10,
            image_size: 112,
            sigmas: vec![10.0, 20.0, 30.0, 40.0, 50.0],
            pca_images: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root seed; every module draws a named sub-seed from it.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub net: NetConfig,
    pub backbone: BackboneConfig,
    pub train: TrainingConfig,
    pub probe: ProbeConfig,
}

impl Config {
    /// Parse TOML text, apply `key=value` overrides, then validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::config("<file>", e.message()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if value.get("train").and_then(|t| t.get("seed")).is_some() {
            return Err(Error::config("train.seed", "set the top-level `seed` instead"));
        }
        let mut cfg: Config = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.inner().to_string())
        })?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path` (or defaults when `None`) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if let Some(specs) = &self.data.eval_specs {
            for (i, s) in specs.iter().enumerate() {
                s.validate()
                    .map_err(|e| Error::config(format!("data.eval_specs[{i}]"), e.to_string()))?;
            }
        }
        if self.data.scene_size < self.train.patch_size && self.data.clean_dir.is_none() {
            return Err(Error::config("data.scene_size", "procedural scenes must be at least train.patch_size"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the resolved config.
    pub fn hash(&self) -> Result<String> {
        hash_json(self)
    }

    pub fn sub_seed(&self, name: &str) -> u64 {
        sub_seed(self.seed, name)
    }

    pub fn eval_specs(&self) -> Vec<DegradationSpec> {
        self.data.eval_specs.clone().unwrap_or_else(|| self.train.task_mix.clone())
    }
}

/// Set a dotted key (`train.steps=10`) in a TOML tree. The value is parsed as
/// a TOML literal, falling back to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not inside a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::config(key, "parent is not a table"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Named, independent seed derived from a root seed.
pub fn sub_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml("[train]\nstepz = 3\n", &[]).unwrap_err();
        match err {
            Error::Config { key, msg } => {
                assert_eq!(key, "train.stepz");
                assert!(msg.contains("stepz"), "{msg}");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn overrides_apply_and_change_the_hash() {
        let base = Config::from_toml("seed = 3\n", &[]).unwrap();
        let cfg = Config::from_toml("seed = 3\n", &["train.steps=7".into(), "net.guidance=none".into()]).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.net.guidance, crate::restoration::Guidance::None);
        assert_ne!(base.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.hash().unwrap(), cfg.clone().hash().unwrap());
        assert!(Config::from_toml("", &["noequals".into()]).is_err());
    }

    #[test]
    fn sub_seeds_are_named_and_stable() {
        assert_eq!(sub_seed(1, "data"), sub_seed(1, "data"));
        assert_ne!(sub_seed(1, "data"), sub_seed(1, "model"));
        assert_ne!(sub_seed(1, "data"), sub_seed(2, "data"));
    }
}
