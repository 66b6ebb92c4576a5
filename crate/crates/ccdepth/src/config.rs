//! Application configuration: one JSON document covering training, loss,
//! network, evaluation, and toy-dataset generation, with named presets and an
//! effective-config snapshot written next to every run's outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CcError, Result};
use crate::evaluator::EvalOptions;
use crate::kitti_data::ToyConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub toy: ToyConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            toy: ToyConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn toy_preset() -> Self {
        AppConfig {
            train: TrainConfig::toy(),
            ..AppConfig::default()
        }
    }

    /// Resolve a named preset ("default", "toy") or a JSON file path.
    pub fn resolve(spec: &str) -> Result<AppConfig> {
        match spec {
            "default" => Ok(AppConfig::default()),
            "toy" => Ok(AppConfig::toy_preset()),
            path => AppConfig::load(Path::new(path)),
        }
    }

    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            CcError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CcError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }

    /// Write the fully-resolved configuration used by a run.
    pub fn write_effective(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(
            out_dir.join("effective_config.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_validate() {
        let d = AppConfig::resolve("default").unwrap();
        d.validate().unwrap();
        assert_eq!(d.train.network.input_width, 640);
        let t = AppConfig::resolve("toy").unwrap();
        t.validate().unwrap();
        assert_eq!(t.train.network.input_width, 128);
    }

    #[test]
    fn round_trip_through_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AppConfig::toy_preset();
        cfg.write_effective(dir.path()).unwrap();
        let back = AppConfig::load(&dir.path().join("effective_config.json")).unwrap();
        assert_eq!(back.train.network.input_width, cfg.train.network.input_width);
        assert_eq!(back.train.lr_initial, cfg.train.lr_initial);
        assert_eq!(back.toy.scenes, cfg.toy.scenes);
    }

    #[test]
    fn malformed_config_names_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        fs::write(&p, r#"{"train": {"epochs": "twenty"}}"#).unwrap();
        let err = AppConfig::load(&p).unwrap_err();
        let msg = err.to_string();
        // the message names the offending value, expected type, and location
        assert!(msg.contains("twenty") && msg.contains("usize"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");

        fs::write(&p, r#"{"no_such_field": 1}"#).unwrap();
        let err = AppConfig::load(&p).unwrap_err();
        assert!(err.to_string().contains("no_such_field"));
    }
}
