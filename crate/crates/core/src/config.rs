//! Run configuration: one JSON document, optionally overridden from the
//! environment.
//!
//! `SPARSEMP_TRAINING__BATCH_SIZE=64` sets `training.batch_size`; `__`
//! separates path segments, numeric segments index arrays, and values are
//! parsed as JSON with a plain-string fallback.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{validate_run, NetworkSpec, ShardPlan, TrainingConfig};
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "SPARSEMP_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClusterConfig {
    /// All nodes as threads of one process.
    Loopback { nodes: usize },
    /// One process per node; `peers[i]` is node `i`'s listen address.
    Tcp {
        peers: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

fn default_timeout() -> f64 {
    30.0
}

impl ClusterConfig {
    pub fn nodes(&self) -> usize {
        match self {
            ClusterConfig::Loopback { nodes } => *nodes,
            ClusterConfig::Tcp { peers, .. } => peers.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub network: NetworkSpec,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub cluster: ClusterConfig,
    pub output_dir: PathBuf,
    /// Evaluate on the test set after every epoch.
    #[serde(default)]
    pub eval_every_epoch: bool,
}

impl RunConfig {
    /// Reads `path`, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::from_json_with_env(&text, std::env::vars())?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(""))).validated()
    }

    pub fn from_json_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        let mut overrides: Vec<(String, String)> =
            env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, raw) in overrides {
            apply_override(&mut doc, &key[ENV_PREFIX.len()..], &raw)?;
        }
        match doc.get("version") {
            None => return Err(Error::config("version: required field missing")),
            Some(v) if v.as_u64() != Some(CONFIG_VERSION as u64) => {
                return Err(Error::config(format!("version: unsupported config version {v}")))
            }
            _ => {}
        }
        serde_json::from_value(doc).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Relative data and output paths are taken relative to the config
    /// file's directory.
    pub fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        if let Some(t) = self.data.test.as_mut() {
            fix(t);
        }
        fix(&mut self.output_dir);
        self
    }

    /// Cross-field checks; runs before any compute.
    pub fn validate(&self) -> Result<ShardPlan> {
        if let ClusterConfig::Tcp { peers, timeout_secs } = &self.cluster {
            if peers.is_empty() {
                return Err(Error::config("cluster.peers: at least one peer is required"));
            }
            if !(*timeout_secs > 0.0) {
                return Err(Error::config("cluster.timeout_secs must be positive"));
            }
        }
        if self.cluster.nodes() == 0 {
            return Err(Error::config("cluster.nodes must be at least 1"));
        }
        if !self.data.train.is_file() {
            return Err(Error::config(format!(
                "data.train: file not found: {}",
                self.data.train.display()
            )));
        }
        if let Some(t) = self.data.test.as_ref().filter(|t| !t.is_file()) {
            return Err(Error::config(format!("data.test: file not found: {}", t.display())));
        }
        validate_run(&self.network, &self.training, self.cluster.nodes())
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoint")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.jsonl")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.output_dir.join("summary.json")
    }
}

fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::config(format!("{ENV_PREFIX}{key}: malformed override key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for (i, seg) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.clone(), value);
                    return Ok(());
                }
                map.entry(seg.clone()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| {
                    Error::config(format!("{ENV_PREFIX}{key}: segment '{seg}' must index an array"))
                })?;
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(format!("{ENV_PREFIX}{key}: index {idx} out of range")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::config(format!(
                    "{ENV_PREFIX}{key}: '{seg}' is not inside an object or array"
                )))
            }
        };
    }
    Ok(())
}
