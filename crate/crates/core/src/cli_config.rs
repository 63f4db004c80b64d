//! Config resolution, run manifests, exit codes and JSON-lines event logs.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::synthdata::{SynthError, SynthSpec};
use crate::train_eval::{write_atomic, TrainConfig, TrainError};

pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("`{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Read { .. } => None,
        }
    }
}

/// Constraint checks run after deserialization.
pub trait Validate {
    fn check(&self) -> Result<(), ConfigError>;
}

impl Validate for TrainConfig {
    fn check(&self) -> Result<(), ConfigError> {
        self.validate().map_err(|e| match e {
            TrainError::Config { key, reason } => ConfigError::Invalid { key, reason },
            other => ConfigError::Invalid { key: String::new(), reason: other.to_string() },
        })
    }
}

impl Validate for SynthSpec {
    fn check(&self) -> Result<(), ConfigError> {
        self.validate().map_err(|e| match e {
            SynthError::Spec { field, reason } => ConfigError::Invalid { key: field.to_string(), reason },
            other => ConfigError::Invalid { key: String::new(), reason: other.to_string() },
        })
    }
}

/// Parses `key=value` overrides. Values are read as JSON when they parse
/// (`2`, `true`, `[3, 5]`) and as plain strings otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid { key: text.to_string(), reason: "override must look like key=value".into() })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

fn set_path(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut parts = key.split('.').peekable();
    let mut node = root;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let child = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = child
            .as_object_mut()
            .ok_or_else(|| ConfigError::Invalid { key: key.to_string(), reason: format!("`{part}` is not an object") })?;
    }
    Err(ConfigError::Invalid { key: key.to_string(), reason: "empty key".into() })
}

/// Loads a JSON object from `file` (missing path or empty file means `{}`),
/// applies dotted-key `overrides` on top and deserializes the result.
///
/// Unknown keys, type mismatches and constraint violations are reported
/// with the offending key path. Returns the config and its fully resolved
/// JSON form (defaults included).
pub fn resolve_config<C>(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<(C, Value), ConfigError>
where
    C: DeserializeOwned + Serialize + Validate,
{
    let mut root = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_path_buf(), reason: e.to_string() })?;
            if text.trim().is_empty() {
                Map::new()
            } else {
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(ConfigError::Read { path: path.to_path_buf(), reason: "config must be a JSON object".into() }),
                    Err(e) => return Err(ConfigError::Read { path: path.to_path_buf(), reason: e.to_string() }),
                }
            }
        }
        None => Map::new(),
    };
    for (key, value) in overrides {
        set_path(&mut root, key, value.clone())?;
    }
    let cfg: C = serde_path_to_error::deserialize(Value::Object(root)).map_err(|e| {
        let key = e.path().to_string();
        let reason = e.into_inner().to_string();
        ConfigError::Invalid { key: key.split('[').next().unwrap_or(&key).to_string(), reason }
    })?;
    cfg.check()?;
    let resolved = serde_json::to_value(&cfg).map_err(|e| ConfigError::Invalid { key: String::new(), reason: e.to_string() })?;
    Ok((cfg, resolved))
}

pub fn unix_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Record of one CLI invocation; with the resolved config and seed it is
/// enough to re-run the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            config: Value::Null,
            seed: None,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: unix_millis(),
            finished_unix_ms: 0,
            artifacts: Vec::new(),
        }
    }

    /// Stamps the end time and writes the manifest atomically. Every listed
    /// artifact must exist.
    pub fn finish(&mut self, path: &Path) -> Result<(), TrainError> {
        if let Some(missing) = self.artifacts.iter().find(|p| !p.exists()) {
            return Err(TrainError::io(missing, "artifact listed in the run manifest does not exist"));
        }
        self.finished_unix_ms = unix_millis();
        let text = serde_json::to_vec_pretty(self).map_err(|e| TrainError::io(path, e))?;
        write_atomic(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TrainError::io(path, e))
    }
}

/// Line-delimited JSON event writer. Each event gets `ts_ms`.
pub struct EventLog {
    out: Box<dyn Write + Send>,
}

impl EventLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { out }
    }

    pub fn stderr() -> Self {
        Self::new(Box::new(std::io::stderr()))
    }

    pub fn emit(&mut self, mut event: Value) {
        if let Value::Object(m) = &mut event {
            m.insert("ts_ms".into(), Value::from(unix_millis()));
        }
        let _ = writeln!(self.out, "{event}");
        let _ = self.out.flush();
    }
}
