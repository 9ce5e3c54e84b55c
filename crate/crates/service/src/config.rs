use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use doseloop_core::dataset::TARGET_COLUMN;
use doseloop_core::feedback::LoopConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("invalid bind address `{0}`")]
    Bind(String),
    #[error("{0} does not exist")]
    MissingPath(String),
    #[error("{0} is required")]
    Required(&'static str),
}

/// Service and CLI settings, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Static bearer token; requests without it get 401.
    pub token: Option<String>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub target: String,
    /// Directory of per-version snapshots.
    pub snapshots: Option<PathBuf>,
    pub dose_grid: Vec<f64>,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            token: None,
            train: None,
            test: None,
            target: TARGET_COLUMN.into(),
            snapshots: None,
            dose_grid: vec![0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0],
            loop_config: LoopConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&body).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn bind_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.bind.parse().map_err(|_| ConfigError::Bind(self.bind.clone()))
    }

    /// Checks what `serve` needs: a valid address and existing data files.
    pub fn validate_for_serve(&self) -> Result<(), ConfigError> {
        self.bind_addr()?;
        for (name, p) in [("train", &self.train), ("test", &self.test)] {
            let p = p.as_ref().ok_or(ConfigError::Required(name))?;
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.display().to_string()));
            }
        }
        Ok(())
    }
}
