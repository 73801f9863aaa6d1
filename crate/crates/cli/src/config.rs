use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use temprox::analysis::OverlapConfig;
use temprox::data::{PreprocessConfig, SynthConfig};
use temprox::evaluation::EvalConfig;
use temprox::model::ModelConfig;
use temprox::training::{SweepGrid, TrainConfig};

/// File inputs. Relative paths in a config file are resolved against the
/// file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Raw `user,item,timestamp` CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Preprocessed dataset JSON (or a raw CSV, preprocessed on load).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run needs. Scalars precede tables so the TOML form
/// serializes cleanly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides every component seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataPaths,
    pub preprocess: PreprocessConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub overlap: OverlapConfig,
    pub sweep: SweepGrid,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.out);
        rebase(base, &mut cfg.data.input);
        rebase(base, &mut cfg.data.dataset);
        rebase(base, &mut cfg.data.checkpoint);
        Ok(cfg)
    }

    /// Pushes the top-level seed into every component.
    pub fn resolve_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.train.seed = seed;
            self.eval.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate().context("[synth]")?;
        self.model.validate().context("[model]")?;
        self.train.validate().context("[train]")?;
        self.eval.validate().context("[eval]")?;
        self.overlap.validate().context("[overlap]")?;
        Ok(())
    }

    /// Writes `<dir>/<command>.config.toml`, the snapshot that reproduces
    /// the run.
    pub fn snapshot(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{command}.config.toml"));
        let mut resolved = self.clone();
        for p in [
            &mut resolved.out,
            &mut resolved.data.input,
            &mut resolved.data.dataset,
            &mut resolved.data.checkpoint,
        ] {
            if let Some(path) = p {
                *path = absolute(path);
            }
        }
        let body = toml::to_string(&resolved).context("serializing resolved config")?;
        fs::write(&path, format!("# temprox {command}\n{body}"))?;
        Ok(path)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
