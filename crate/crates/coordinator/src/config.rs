//! Server configuration: a TOML file with environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::Liveness;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {var}: {detail}")]
    Env { var: &'static str, detail: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    /// Framed TCP listener for nodes.
    pub wire_addr: SocketAddr,
    /// HTTP and websocket listener for operators and the dashboard.
    pub http_addr: SocketAddr,
    /// Journal and checkpoint directory.
    pub data_dir: PathBuf,
    /// Bearer token required for pause/resume. Without one those endpoints
    /// are disabled.
    pub operator_token: Option<String>,
    /// Upper bound on the gap between timer checks.
    pub tick_ms: u64,
    pub heartbeat_interval_secs: u64,
    pub missed_heartbeats: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            wire_addr: "127.0.0.1:7400".parse().expect("valid literal"),
            http_addr: "127.0.0.1:7401".parse().expect("valid literal"),
            data_dir: PathBuf::from("colearn-data"),
            operator_token: None,
            tick_ms: 250,
            heartbeat_interval_secs: 10,
            missed_heartbeats: 3,
        }
    }
}

impl ServerConfig {
    /// Reads `path` (or the defaults when `None`) and applies the
    /// `COLEARN_WIRE_ADDR`, `COLEARN_HTTP_ADDR`, `COLEARN_DATA_DIR` and
    /// `COLEARN_OPERATOR_TOKEN` environment variables.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn addr(name: &'static str, v: String) -> Result<SocketAddr, ConfigError> {
            v.parse().map_err(|e: std::net::AddrParseError| ConfigError::Env {
                var: name,
                detail: e.to_string(),
            })
        }
        if let Some(v) = var("COLEARN_WIRE_ADDR") {
            self.wire_addr = addr("COLEARN_WIRE_ADDR", v)?;
        }
        if let Some(v) = var("COLEARN_HTTP_ADDR") {
            self.http_addr = addr("COLEARN_HTTP_ADDR", v)?;
        }
        if let Some(v) = var("COLEARN_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = var("COLEARN_OPERATOR_TOKEN") {
            self.operator_token = Some(v).filter(|t| !t.is_empty());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tick_ms == 0 {
            return Err(ConfigError::Invalid("tick_ms must be positive".into()));
        }
        if self.heartbeat_interval_secs == 0 || self.missed_heartbeats == 0 {
            return Err(ConfigError::Invalid(
                "heartbeat_interval_secs and missed_heartbeats must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn liveness(&self) -> Liveness {
        Liveness {
            heartbeat_interval_ms: self.heartbeat_interval_secs.saturating_mul(1000),
            missed_heartbeats: self.missed_heartbeats,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ServerConfig::from_toml("tick_ms = 100\noperator_token = \"s3cret\"\n").unwrap();
        assert_eq!(cfg.tick_ms, 100);
        assert_eq!(cfg.operator_token.as_deref(), Some("s3cret"));
        assert_eq!(cfg.wire_addr, ServerConfig::default().wire_addr);
        assert_eq!(cfg.liveness(), Liveness::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ServerConfig::from_toml("tick = 3").is_err());
    }

    #[test]
    fn environment_overrides_file() {
        let mut cfg = ServerConfig::default();
        cfg.apply_env(|k| match k {
            "COLEARN_HTTP_ADDR" => Some("0.0.0.0:9000".into()),
            "COLEARN_DATA_DIR" => Some("/var/lib/colearn".into()),
            "COLEARN_OPERATOR_TOKEN" => Some(String::new()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.http_addr.port(), 9000);
        assert_eq!(cfg.data_dir, PathBuf::from("/var/lib/colearn"));
        assert_eq!(cfg.operator_token, None);
        assert!(cfg.apply_env(|k| (k == "COLEARN_WIRE_ADDR").then(|| "nope".into())).is_err());
    }
}
