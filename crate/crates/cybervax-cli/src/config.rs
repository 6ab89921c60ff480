//! Effective run configuration: defaults, overlaid by an optional JSON
//! config file, overlaid by environment/flag overrides.
//!
//! One document configures every subcommand; each command reads the
//! sections it needs. The merged result is echoed to
//! `effective-config.json` in the output directory so a run can always
//! be reproduced from its artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cybervax_core::attacks::FaceSwapConfig;
use cybervax_core::models::{ImmuneConfig, UNetConfig, ValidatorConfig};
use cybervax_core::training::TrainConfig;
use cybervax_core::{Error, Result};

use crate::GlobalArgs;

/// Evaluation-harness knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Cap on evaluated samples (0 means the whole split).
    pub samples: usize,
    /// Magnitudes per degradation sweep curve.
    pub sweep_points: usize,
    /// Cap on samples per sweep magnitude (0 means the whole split).
    pub sweep_samples: usize,
    /// Output dimension of the random-projection identity embedder.
    pub embedding_dim: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            samples: 32,
            sweep_points: 5,
            sweep_samples: 8,
            embedding_dim: 64,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.sweep_points < 2 {
            return Err(Error::Parameter(format!(
                "eval.sweep_points must be ≥ 2, got {}",
                self.sweep_points
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Parameter("eval.embedding_dim must be positive".into()));
        }
        Ok(())
    }
}

/// The fully resolved configuration a command actually runs with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub resolution: usize,
    pub device: String,
    pub train: TrainConfig,
    pub model: ImmuneConfig,
    pub validator: ValidatorConfig,
    pub baseline: UNetConfig,
    pub faceswap: FaceSwapConfig,
    pub eval: EvalSettings,
}

/// On-disk shape of the config file: every section optional, partial
/// sections fall back to that section's defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    resolution: Option<usize>,
    device: Option<String>,
    train: Option<TrainConfig>,
    model: Option<ImmuneConfig>,
    validator: Option<ValidatorConfig>,
    baseline: Option<UNetConfig>,
    faceswap: Option<FaceSwapConfig>,
    eval: Option<EvalSettings>,
}

impl RunConfig {
    /// Merge defaults, the optional config file, and flag/environment
    /// overrides (clap resolves `CYBERVAX_*` variables into `globals`,
    /// with explicit flags winning).
    pub fn resolve(globals: &GlobalArgs) -> Result<RunConfig> {
        let file = match &globals.config {
            Some(path) => read_file_config(path)?,
            None => FileConfig::default(),
        };

        let mut cfg = RunConfig {
            seed: 0,
            resolution: 0, // provisional; fixed below
            device: "cpu".to_string(),
            train: file.train.unwrap_or_default(),
            model: file.model.unwrap_or_default(),
            validator: file.validator.unwrap_or_default(),
            baseline: file.baseline.unwrap_or_default(),
            faceswap: file.faceswap.unwrap_or_default(),
            eval: file.eval.unwrap_or_default(),
        };

        // One seed drives the whole run. Precedence: flag/env, then the
        // file's top-level seed, then the file's train section.
        cfg.seed = globals
            .seed
            .or(file.seed)
            .unwrap_or(cfg.train.seed);
        cfg.train.seed = cfg.seed;

        // Resolution: flag/env, then the file's top level; otherwise
        // follow whatever the model section says. An explicit value is
        // propagated into every per-component config.
        match globals.resolution.or(file.resolution) {
            Some(res) => cfg.set_resolution(res)?,
            None => cfg.resolution = cfg.model.vaccinator.resolution,
        }

        if let Some(device) = globals.device.as_ref().or(file.device.as_ref()) {
            cfg.device = device.clone();
        }
        if cfg.device != "cpu" {
            return Err(Error::Parameter(format!(
                "device {:?} is not available; this build supports only \"cpu\"",
                cfg.device
            )));
        }

        // Only the sections every command relies on are validated here;
        // each command validates the model sections it actually trains,
        // so e.g. a 16×16 training run is not rejected because the
        // unused baseline section defaults to a deeper network.
        cfg.train.validate()?;
        cfg.eval.validate()?;
        Ok(cfg)
    }

    /// Force every component to one working resolution.
    pub fn set_resolution(&mut self, res: usize) -> Result<()> {
        if res == 0 {
            return Err(Error::Parameter("resolution must be positive".into()));
        }
        self.resolution = res;
        self.model.vaccinator.resolution = res;
        self.model.neutraliser.resolution = res;
        self.validator.resolution = res;
        self.baseline.resolution = res;
        self.faceswap.resolution = res;
        Ok(())
    }

    /// Validate every section at once (commands normally validate only
    /// what they use).
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.validator.validate()?;
        self.baseline.validate()?;
        self.faceswap.validate()?;
        self.eval.validate()?;
        if self.model.vaccinator.resolution != self.resolution {
            return Err(Error::Parameter(format!(
                "model resolution {} disagrees with run resolution {}",
                self.model.vaccinator.resolution, self.resolution
            )));
        }
        Ok(())
    }

    /// Echo the configuration this run actually uses.
    pub fn write_effective(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
        let path = out_dir.join("effective-config.json");
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        cybervax_core::util::atomic_write(&path, &json)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parameter(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: FileConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Parameter(format!("bad config {}: {e}", path.display())))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn globals() -> GlobalArgs {
        GlobalArgs::default()
    }

    #[test]
    fn defaults_are_coherent() {
        let cfg = RunConfig::resolve(&globals()).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.resolution, 64);
        assert_eq!(cfg.device, "cpu");
        assert_eq!(cfg.validator.resolution, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"seed": 11, "resolution": 64, "train": {"steps": 77}}"#,
        )
        .unwrap();

        let file_only = GlobalArgs { config: Some(path.clone()), ..globals() };
        let cfg = RunConfig::resolve(&file_only).unwrap();
        assert_eq!((cfg.seed, cfg.resolution, cfg.train.steps), (11, 64, 77));
        assert_eq!(cfg.model.vaccinator.resolution, 64);
        assert_eq!(cfg.train.seed, 11, "run seed drives training");

        let flagged = GlobalArgs {
            config: Some(path),
            seed: Some(5),
            resolution: Some(32),
            ..globals()
        };
        let cfg = RunConfig::resolve(&flagged).unwrap();
        assert_eq!((cfg.seed, cfg.resolution, cfg.train.steps), (5, 32, 77));
        assert_eq!(cfg.faceswap.resolution, 32);
    }

    #[test]
    fn model_section_sets_resolution_when_no_override_given() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let doc = serde_json::json!({ "model": cybervax_core::models::ImmuneConfig::toy() });
        std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        let cfg = RunConfig::resolve(&GlobalArgs { config: Some(path), ..globals() }).unwrap();
        assert_eq!(cfg.resolution, 16);
        // Components that were not in the file stay at their own
        // defaults unless the resolution was set explicitly.
        assert_eq!(cfg.validator.resolution, 64);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_devices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"stepz": 3}"#).unwrap();
        let err = RunConfig::resolve(&GlobalArgs { config: Some(path), ..globals() }).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));

        let err = RunConfig::resolve(&GlobalArgs {
            device: Some("cuda".into()),
            ..globals()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Parameter(_)), "{err}");
    }

    #[test]
    fn negative_loss_weight_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"weights": {"imp": -1.0}}}"#).unwrap();
        let err = RunConfig::resolve(&GlobalArgs { config: Some(path), ..globals() }).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)), "{err}");
    }

    #[test]
    fn effective_echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::resolve(&globals()).unwrap();
        let path = cfg.write_effective(dir.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
