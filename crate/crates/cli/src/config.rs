//! The single JSON run configuration and `key=value` overrides.

use std::path::{Path, PathBuf};

use pyroemu::emulator::ModelConfig;
use pyroemu::firesim::RosParams;
use pyroemu::training::TrainConfig;
use pyroemu::worldgen::WorldgenConfig;
use pyroemu::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const WORKSPACE_ENV: &str = "PYROEMU_WORKSPACE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub c: usize,
    pub d: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workspace: PathBuf,
    pub seed: u64,
    pub n_scenarios: usize,
    /// The first `n_train` scenarios train; the rest validate.
    pub n_train: usize,
    /// Cap on validation fires used for full-map prediction; `None` uses all.
    pub n_prediction: Option<usize>,
    /// Simulation horizon and last rollout interval.
    pub t_max: usize,
    pub worldgen: WorldgenConfig,
    pub ros: RosParams,
    pub model: ModelConfig,
    /// Shared training settings; `c`, `d`, `p` come from each grid point.
    pub train: TrainConfig,
    pub grid: Vec<GridPoint>,
    pub ae_crops: usize,
    pub ae_held_out: usize,
    pub ae_crop_side: usize,
    pub eval_ranges: Vec<(usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            workspace: PathBuf::from("workspace"),
            seed: 0,
            n_scenarios: 195,
            n_train: 155,
            n_prediction: None,
            t_max: 22,
            worldgen: WorldgenConfig::default(),
            ros: RosParams::default(),
            model: ModelConfig::default(),
            grid: TrainConfig::standard_grid(&train).iter().map(|t| GridPoint { c: t.c, d: t.d, p: t.p }).collect(),
            train,
            ae_crops: 2000,
            ae_held_out: 200,
            ae_crop_side: 128,
            eval_ranges: vec![(0, 22), (5, 22)],
        }
    }
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies overrides in order, then
    /// the workspace environment variable, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
                serde_json::from_str(&text).map_err(|e| Error::Format { path: p.to_path_buf(), msg: e.to_string() })?
            }
            None => serde_json::to_value(Self::default())?,
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if let Ok(ws) = std::env::var(WORKSPACE_ENV) {
            if !ws.is_empty() {
                cfg.workspace = PathBuf::from(ws);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.worldgen.validate()?;
        self.ros.validate()?;
        self.model.validate()?;
        if self.n_train > self.n_scenarios {
            return Err(Error::Config(format!("n_train {} exceeds n_scenarios {}", self.n_train, self.n_scenarios)));
        }
        if self.t_max == 0 || self.t_max > self.worldgen.n_intervals {
            return Err(Error::Config(format!("t_max {} must lie in 1..={} (worldgen.n_intervals)", self.t_max, self.worldgen.n_intervals)));
        }
        for g in &self.grid {
            self.train_config(g).validate()?;
        }
        for &(a, b) in &self.eval_ranges {
            if a > b || b > self.t_max {
                return Err(Error::Config(format!("evaluation range {a}..={b} outside 0..={}", self.t_max)));
            }
        }
        if self.ae_crop_side == 0 || self.ae_crop_side % pyroemu::emulator::DOWNSAMPLE != 0 {
            return Err(Error::Config(format!("ae_crop_side must be a positive multiple of {}", pyroemu::emulator::DOWNSAMPLE)));
        }
        Ok(())
    }

    pub fn train_config(&self, g: &GridPoint) -> TrainConfig {
        TrainConfig { c: g.c, d: g.d, p: g.p, ..self.train.clone() }
    }

    pub fn grid_configs(&self) -> Vec<TrainConfig> {
        self.grid.iter().map(|g| self.train_config(g)).collect()
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets a dotted path such as `train.emulator_epochs=5`; the value is parsed
/// as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(*part))
            .ok_or_else(|| Error::Config(format!("override key `{key}`: no section `{part}`")))?;
    }
    let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("override key `{key}` does not name a field")))?;
    let last = parts[parts.len() - 1];
    if !obj.contains_key(last) {
        return Err(Error::Config(format!("override key `{key}`: unknown field `{last}`")));
    }
    obj.insert(last.to_string(), parse_value(raw));
    Ok(())
}
