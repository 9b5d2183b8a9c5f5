//! Run configuration: built-in defaults, then an optional preset, then the
//! TOML file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cm_core::data::{ProtocolFormat, SynthConfig};
use cm_core::eval::TdcfParams;
use cm_core::frontend::FrontendConfig;
use cm_core::nn::BackendKind;
use cm_core::probe::ProbeConfig;
use cm_core::train::TrainConfig;
use cm_core::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub protocol_format: ProtocolFormat,
    pub train_protocol: Option<PathBuf>,
    pub dev_protocol: Option<PathBuf>,
    pub eval_protocol: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { protocol_format: ProtocolFormat::CanonicalTsv, train_protocol: None, dev_protocol: None, eval_protocol: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub alpha: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads for trial-level parallelism.
    pub jobs: usize,
    /// Training preset the `[train]` table starts from.
    pub preset: Option<String>,
    /// Back end to train; when set for evaluation, the checkpoint must match.
    pub backend: Option<BackendKind>,
    pub data: DataConfig,
    pub frontend: FrontendConfig,
    pub train: TrainConfig,
    pub tdcf: TdcfParams,
    pub probe: ProbeConfig,
    pub synth: SynthConfig,
    pub stats: StatsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            jobs: 1,
            preset: None,
            backend: None,
            data: DataConfig::default(),
            frontend: FrontendConfig::default(),
            train: TrainConfig::default(),
            tdcf: TdcfParams::default(),
            probe: ProbeConfig::default(),
            synth: SynthConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn absolutize(p: &mut Option<PathBuf>, base: &Path) -> Result<()> {
    if let Some(path) = p {
        let joined = if path.is_absolute() { path.clone() } else { base.join(&*path) };
        *path = std::path::absolute(&joined).map_err(|e| Error::io(&joined, e))?;
    }
    Ok(())
}

impl RunConfig {
    /// Resolves defaults, the preset (flag wins over file) and the file.
    /// Relative paths in the file are taken relative to the file.
    pub fn load(path: Option<&Path>, preset_flag: Option<&str>) -> Result<Self> {
        let file: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse().map_err(|e| config_err(p, e))?
            }
            None => toml::Table::new(),
        };
        let preset = match preset_flag {
            Some(p) => Some(p.to_string()),
            None => match file.get("preset") {
                Some(toml::Value::String(s)) => Some(s.clone()),
                Some(_) => return Err(Error::Config("preset must be a string".into())),
                None => None,
            },
        };
        let mut base = RunConfig::default();
        if let Some(name) = &preset {
            base.train = TrainConfig::preset(name)?;
        }
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, file);
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e| config_err(path.unwrap_or(Path::new("<defaults>")), e))?;
        cfg.preset = preset;

        let base_dir = match path {
            Some(p) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
            None => PathBuf::from("."),
        };
        cfg.resolve_paths(&base_dir)?;
        Ok(cfg)
    }

    /// Makes every path absolute so the echoed config reruns from anywhere.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        absolutize(&mut self.data.train_protocol, base)?;
        absolutize(&mut self.data.dev_protocol, base)?;
        absolutize(&mut self.data.eval_protocol, base)?;
        absolutize(&mut self.frontend.manifest, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.train.validate()?;
        self.tdcf.validate()?;
        if !(self.stats.alpha > 0.0 && self.stats.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.stats.alpha)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}
