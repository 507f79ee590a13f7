//! The single versioned run-configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critics::{CriticKind, CriticSpec};
use crate::error::{Error, Result};
use crate::generators::GeneratorSpec;
use crate::training::TrainingConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest produced by `lenslesskit ingest`.
    pub manifest: PathBuf,
    /// Seed PSF (binary grid format).
    pub seed_psf: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default = "CriticSpec::patch")]
    pub critic_patch: CriticSpec,
    #[serde(default = "CriticSpec::global")]
    pub critic_global: CriticSpec,
}

impl RunConfig {
    /// Parse and fully validate; schema violations carry field paths.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let config: RunConfig =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                path: "schema_version".into(),
                message: format!(
                    "unsupported version {} (this build reads {SCHEMA_VERSION})",
                    self.schema_version
                ),
            });
        }
        self.training.validate()?;
        self.generator.validate()?;
        self.critic_patch.validate(self.training.resolution)?;
        self.critic_global.validate(self.training.resolution)?;
        if self.critic_patch.kind != CriticKind::Patch {
            return Err(Error::Config {
                path: "critic_patch.kind".into(),
                message: "the lensless-domain critic must be a patch critic".into(),
            });
        }
        if self.critic_global.kind != CriticKind::GlobalBackbone {
            return Err(Error::Config {
                path: "critic_global.kind".into(),
                message: "the lensed-domain critic must be a global-backbone critic".into(),
            });
        }
        if self.generator.input_resolution != self.training.resolution {
            return Err(Error::Config {
                path: "generator.input_resolution".into(),
                message: format!(
                    "{} does not match training.resolution {}",
                    self.generator.input_resolution, self.training.resolution
                ),
            });
        }
        Ok(())
    }

    /// Digest of the canonical JSON form; stamped into reports.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Copy the full config into the output directory for provenance.
    pub fn save_copy(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "schema_version": 1,
            "output_dir": "/tmp/run",
            "data": {"manifest": "m.json", "seed_psf": "k.psf"},
            "training": {"resolution": 64},
            "generator": {"input_resolution": 64, "depth": 3}
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, minimal_json()).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.training.resolution, 64);
        assert_eq!(cfg.critic_patch.kind, CriticKind::Patch);
        assert!(!cfg.fingerprint().is_empty());
    }

    #[test]
    fn unknown_field_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let bad = minimal_json().replace(
            "\"training\": {\"resolution\": 64}",
            "\"training\": {\"resolution\": 64, \"learning_rate\": 0.1}",
        );
        std::fs::write(&path, bad).unwrap();
        match RunConfig::load(&path) {
            Err(Error::Config { path, .. }) => {
                assert!(path.contains("training"), "path was {path}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_resolution_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let bad = minimal_json().replace(
            "\"generator\": {\"input_resolution\": 64, \"depth\": 3}",
            "\"generator\": {\"input_resolution\": 128, \"depth\": 3}",
        );
        std::fs::write(&path, bad).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, minimal_json().replace("\"schema_version\": 1", "\"schema_version\": 7"))
            .unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
