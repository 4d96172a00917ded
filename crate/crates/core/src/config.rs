//! Run configuration: every module's settings in one TOML file.
//!
//! Unknown keys are rejected and missing keys take their defaults, so an
//! empty file is a valid configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::{find_rung, ladder, Rung};
use crate::error::{Error, Result};
use crate::nets::ShapeConfig;
use crate::trainer::TrainConfig;
use crate::world::WorldConfig;

pub const SNAPSHOT_FILE: &str = "config.toml";
pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Also compute FID, SSIM and the per-offset FID table.
    pub generation: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            generation: true,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Rung names; empty means the whole ladder.
    pub rungs: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![1, 2, 3],
            rungs: Vec::new(),
        }
    }
}

impl AblationConfig {
    pub fn selected(&self) -> Result<Vec<Rung>> {
        if self.rungs.is_empty() {
            return Ok(ladder());
        }
        self.rungs
            .iter()
            .map(|n| find_rung(n).ok_or_else(|| Error::Config(format!("unknown ablation rung {n:?}"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Training seed; the world has its own seed under `[world]`.
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Dataset root; `<run_dir>/data` when unset.
    pub data_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub shapes: ShapeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            run_dir: PathBuf::from("runs/default"),
            data_dir: None,
            world: WorldConfig::default(),
            shapes: ShapeConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((RunConfig::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.run_dir.join("data"))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.shapes.validate()?;
        let n = (self.world.n_identities * self.world.views_per_identity * self.world.camera_styles) as usize;
        self.train.validate(n)?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval batch_size must be positive".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        self.ablation.selected().map(|_| ())
    }

    /// Copies the original text verbatim to `config.toml` and the values in
    /// effect, overrides included, to `config.resolved.toml`.
    pub fn snapshot(&self, original: &str, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: &str| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put(SNAPSHOT_FILE, original)?;
        put(RESOLVED_FILE, &self.to_toml()?)
    }
}
