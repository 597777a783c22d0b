//! Server configuration: a TOML file plus environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use teleop_core::arm::ArmConfig;
use teleop_core::gateway::fanout::{DEFAULT_CLOUD_BUDGET, DEFAULT_EVENT_QUEUE_CAP, DEFAULT_MAX_SPECTATORS};
use teleop_core::gateway::{FanoutConfig, LatencyModel};
use teleop_core::progression::BadgeCatalog;
use teleop_core::session::DEFAULT_COUNTDOWN_S;
use teleop_core::task::TaskCatalog;

/// Environment variables read by [`ServerConfig::apply_env`].
pub const ENV_BIND: &str = "TELEOP_BIND";
pub const ENV_PORT: &str = "TELEOP_PORT";
pub const ENV_MAX_SPECTATORS: &str = "TELEOP_MAX_SPECTATORS";
pub const ENV_LATENCY_BASE_MS: &str = "TELEOP_LATENCY_BASE_MS";
pub const ENV_LATENCY_JITTER_MS: &str = "TELEOP_LATENCY_JITTER_MS";
pub const ENV_LATENCY_DROP_RATE: &str = "TELEOP_LATENCY_DROP_RATE";
pub const ENV_LATENCY_SEED: &str = "TELEOP_LATENCY_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The file parsed but a field is wrong; `field` is the dotted path.
    #[error("{path}: schema violation at {field}: {message}")]
    Schema { path: PathBuf, field: String, message: String },
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub bind: SocketAddr,
    pub max_spectators: usize,
    pub event_queue_cap: usize,
    pub cloud_budget: usize,
    pub countdown_s: f64,
    pub disconnect_grace_s: f64,
    /// Token signing key; a random key is used when absent.
    pub token_key: Option<String>,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            max_spectators: DEFAULT_MAX_SPECTATORS,
            event_queue_cap: DEFAULT_EVENT_QUEUE_CAP,
            cloud_budget: DEFAULT_CLOUD_BUDGET,
            countdown_s: DEFAULT_COUNTDOWN_S,
            disconnect_grace_s: 5.0,
            token_key: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub arm: PathBuf,
    pub tasks: PathBuf,
    pub badges: PathBuf,
    pub data: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            arm: "arm.toml".into(),
            tasks: "tasks".into(),
            badges: "badges.toml".into(),
            data: "data".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencySection {
    pub base_ms: f64,
    pub jitter_ms: f64,
    pub drop_rate: f64,
    pub seed: u64,
}

impl LatencySection {
    pub fn model(&self) -> LatencyModel {
        LatencyModel::new(self.base_ms, self.jitter_ms, self.drop_rate, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub server: ServerSection,
    pub paths: PathsSection,
    pub latency: LatencySection,
}

/// Everything a server needs, loaded and validated.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ServerConfig,
    pub catalog: TaskCatalog,
    pub arm: ArmConfig,
    pub badges: BadgeCatalog,
}

impl ServerConfig {
    /// Parses TOML text; errors name the offending field.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let schema = |field: String, message: String| ConfigError::Schema {
            path: origin.to_path_buf(),
            field,
            message,
        };
        let de = toml::de::Deserializer::parse(text).map_err(|e| schema("<document>".into(), e.message().into()))?;
        let config: ServerConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            schema(field, e.inner().message().to_string())
        })?;
        config.validate().map_err(|(field, message)| schema(field.into(), message))?;
        Ok(config)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text, path)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [&mut p.arm, &mut p.tasks, &mut p.badges, &mut p.data] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        let s = &self.server;
        if s.max_spectators == 0 {
            return Err(("server.max_spectators", "must be at least 1".into()));
        }
        if s.event_queue_cap == 0 {
            return Err(("server.event_queue_cap", "must be at least 1".into()));
        }
        if s.cloud_budget == 0 {
            return Err(("server.cloud_budget", "must be at least 1".into()));
        }
        if !(s.countdown_s.is_finite() && s.countdown_s >= 0.0) {
            return Err(("server.countdown_s", "must be a non-negative number".into()));
        }
        if !(s.disconnect_grace_s.is_finite() && s.disconnect_grace_s >= 0.0) {
            return Err(("server.disconnect_grace_s", "must be a non-negative number".into()));
        }
        self.latency.model().validate().map_err(|m| ("latency", m))
    }

    /// Applies `TELEOP_*` overrides found through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(var: &'static str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse().map_err(|e: T::Err| ConfigError::Env {
                var,
                message: format!("{v:?}: {e}"),
            })
        }
        if let Some(v) = lookup(ENV_BIND) {
            self.server.bind = parse(ENV_BIND, &v)?;
        }
        if let Some(v) = lookup(ENV_PORT) {
            self.server.bind.set_port(parse(ENV_PORT, &v)?);
        }
        if let Some(v) = lookup(ENV_MAX_SPECTATORS) {
            self.server.max_spectators = parse(ENV_MAX_SPECTATORS, &v)?;
        }
        if let Some(v) = lookup(ENV_LATENCY_BASE_MS) {
            self.latency.base_ms = parse(ENV_LATENCY_BASE_MS, &v)?;
        }
        if let Some(v) = lookup(ENV_LATENCY_JITTER_MS) {
            self.latency.jitter_ms = parse(ENV_LATENCY_JITTER_MS, &v)?;
        }
        if let Some(v) = lookup(ENV_LATENCY_DROP_RATE) {
            self.latency.drop_rate = parse(ENV_LATENCY_DROP_RATE, &v)?;
        }
        if let Some(v) = lookup(ENV_LATENCY_SEED) {
            self.latency.seed = parse(ENV_LATENCY_SEED, &v)?;
        }
        self.validate().map_err(|(field, message)| ConfigError::Env {
            var: "TELEOP_*",
            message: format!("{field}: {message}"),
        })
    }

    pub fn fanout(&self) -> FanoutConfig {
        FanoutConfig {
            max_spectators: self.server.max_spectators,
            event_queue_cap: self.server.event_queue_cap,
            cloud_budget: self.server.cloud_budget,
        }
    }

    pub fn episodes_dir(&self) -> PathBuf {
        self.paths.data.join("episodes")
    }

    pub fn progression_dir(&self) -> PathBuf {
        self.paths.data.join("progression")
    }

    /// Loads the arm, task and badge files the config points at.
    pub fn load_assets(self) -> Result<Loaded, ConfigError> {
        let load = |path: &Path, message: String| ConfigError::Load {
            path: path.to_path_buf(),
            message,
        };
        let arm = ArmConfig::load(&self.paths.arm).map_err(|e| load(&self.paths.arm, e.to_string()))?;
        let catalog = TaskCatalog::load_dir(&self.paths.tasks).map_err(|e| load(&self.paths.tasks, e.to_string()))?;
        if catalog.is_empty() {
            return Err(load(&self.paths.tasks, "no task files (*.toml) found".into()));
        }
        let badges =
            BadgeCatalog::load(&self.paths.badges, catalog.ids()).map_err(|e| load(&self.paths.badges, e.to_string()))?;
        Ok(Loaded {
            config: self,
            catalog,
            arm,
            badges,
        })
    }
}
