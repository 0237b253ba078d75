use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Environment variable naming the directory that holds training checkpoints.
pub const CHECKPOINT_DIR_ENV: &str = "DEFOG2REFOG_CHECKPOINT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub foggy_dir: PathBuf,
    pub clear_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    /// Receives the loss log, the run manifest and, unless overridden,
    /// the `checkpoints` subdirectory.
    pub dir: PathBuf,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

/// Contents of a training config file. Relative paths are resolved against
/// the directory containing the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    pub output: OutputPaths,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub iterations: Option<u64>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f64>,
    pub image_size: Option<usize>,
    pub checkpoint_every: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and resolves a config file without validating it.
    pub fn parse(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.foggy_dir);
        resolve(&mut cfg.data.clear_dir);
        resolve(&mut cfg.output.dir);
        if let Some(p) = cfg.output.checkpoint_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.train.perceptual.weights_path.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Applies flag overrides, then the checkpoint directory from the
    /// environment when neither the flags nor the file set one.
    pub fn apply(&mut self, o: &TrainOverrides, env_checkpoint_dir: Option<PathBuf>) {
        let t = &mut self.train;
        if let Some(v) = o.iterations {
            t.iterations = v;
        }
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = o.image_size {
            t.image_size = v;
        }
        if let Some(v) = o.checkpoint_every {
            t.checkpoint_every = v;
        }
        if let Some(v) = &o.output_dir {
            self.output.dir = v.clone();
        }
        if let Some(v) = o.checkpoint_dir.clone().or_else(|| self.output.checkpoint_dir.clone()).or(env_checkpoint_dir) {
            self.output.checkpoint_dir = Some(v);
        }
    }

    /// Every problem with the config, including missing data directories.
    pub fn problems(&self) -> Vec<String> {
        let mut p: Vec<String> = self.train.problems().into_iter().map(|s| format!("train.{s}")).collect();
        for (name, dir) in [("data.foggy_dir", &self.data.foggy_dir), ("data.clear_dir", &self.data.clear_dir)] {
            if !dir.is_dir() {
                p.push(format!("{name}: directory {} does not exist", dir.display()));
            }
        }
        if let Some(w) = &self.train.perceptual.weights_path {
            if !w.is_file() {
                p.push(format!("train.perceptual.weights_path: file {} does not exist", w.display()));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output.checkpoint_dir.clone().unwrap_or_else(|| self.output.dir.join("checkpoints"))
    }
}

/// Reads, resolves, overrides and validates a training config.
pub fn load_run_config(path: &Path, overrides: &TrainOverrides, env_checkpoint_dir: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::parse(path)?;
    cfg.apply(overrides, env_checkpoint_dir);
    cfg.validate()?;
    Ok(cfg)
}
