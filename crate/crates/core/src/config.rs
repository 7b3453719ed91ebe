//! Run configuration: one JSON document covering model, estimator, training,
//! evaluation and paths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DatasetLayout;
use crate::flow::FlowEstimator;
use crate::model::ModelConfig;
use crate::train::{GradCheckOptions, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub dataset_layout: DatasetLayout,
    /// Checkpoint written by training and read by evaluation.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: None,
            dataset_layout: DatasetLayout::Auto,
            checkpoint: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl Paths {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    /// Makes relative paths relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.dataset.as_mut() {
            fix(p);
        }
        if let Some(p) = self.checkpoint.as_mut() {
            fix(p);
        }
        fix(&mut self.out_dir);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub estimator: FlowEstimator,
    pub train: TrainConfig,
    pub gradcheck: GradCheckOptions,
    pub paths: Paths,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.gradcheck.n_params == 0 || !(self.gradcheck.step > 0.0) || !(self.gradcheck.tolerance > 0.0) {
            return Err(Error::Config(
                "gradcheck: n_params, step and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the resolved snapshot into `dir`, creating it if needed.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.batch_size, 2);
    }

    #[test]
    fn snapshot_roundtrips_and_is_complete() {
        let cfg = RunConfig::parse(r#"{"seed": 7, "train": {"epochs": 3}, "estimator": {"kind": "zero"}}"#).unwrap();
        let json = cfg.to_json();
        assert_eq!(RunConfig::parse(&json).unwrap(), cfg);
        for key in ["\"plateau\"", "\"min_delta\"", "\"smooth\"", "\"kernel_size\"", "\"out_dir\""] {
            assert!(json.contains(key), "{key} missing");
        }
    }

    #[test]
    fn errors_carry_location() {
        let err = RunConfig::parse("{\n  \"seed\": 1,\n  \"trian\": {}\n}").unwrap_err().to_string();
        assert!(err.contains("trian") && err.contains("line 3"), "{err}");
        let err = RunConfig::parse("{\"train\": {\"epochs\": -1}}").unwrap_err().to_string();
        assert!(err.contains("line 1 column"), "{err}");
        assert!(matches!(
            RunConfig::parse(r#"{"train": {"batch_size": 0}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"paths": {"dataset": "data", "out_dir": "/abs/out"}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.dataset, Some(dir.path().join("data")));
        assert_eq!(cfg.paths.out_dir, PathBuf::from("/abs/out"));
        assert_eq!(cfg.paths.checkpoint_path(), PathBuf::from("/abs/out/model.ckpt"));
    }
}
