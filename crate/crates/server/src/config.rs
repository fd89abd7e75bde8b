//! Server settings from the config directory and environment.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

pub const ENV_BIND: &str = "HUDDLE_BIND";
pub const ENV_ALLOWLIST: &str = "HUDDLE_ALLOWLIST";
pub const ENV_MASTER_KEY: &str = "HUDDLE_MASTER_KEY_FILE";
pub const ENV_DATA_DIR: &str = "HUDDLE_DATA_DIR";

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
/// Every join-link request takes at least this long, found or not.
pub const DEFAULT_JOIN_DELAY: Duration = Duration::from_millis(250);
pub const DEFAULT_TICK: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{var}: '{value}' is not a socket address")]
    BadBind { var: &'static str, value: String },
    #[error("allowlist not found at {0}")]
    MissingAllowlist(PathBuf),
    #[error("master key not found at {0}")]
    MissingMasterKey(PathBuf),
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub allowlist_path: PathBuf,
    pub master_key_path: PathBuf,
    pub data_dir: PathBuf,
    /// Optional `providers.json` in the config directory.
    pub providers_path: Option<PathBuf>,
    pub join_delay: Duration,
    pub tick: Duration,
    /// fsync every record.
    pub sync: bool,
}

/// Where experiments are persisted: `HUDDLE_DATA_DIR` or `<config_dir>/data`.
pub fn data_dir(config_dir: &Path, env: impl Fn(&str) -> Option<String>) -> PathBuf {
    env(ENV_DATA_DIR).map(PathBuf::from).unwrap_or_else(|| config_dir.join("data"))
}

impl ServerConfig {
    /// Paths default to files inside `config_dir`; environment variables
    /// override them. Nothing is read here beyond existence checks.
    pub fn resolve(config_dir: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let bind_s = env(ENV_BIND).unwrap_or_else(|| DEFAULT_BIND.to_string());
        let bind = bind_s.parse().map_err(|_| ConfigError::BadBind {
            var: ENV_BIND,
            value: bind_s.clone(),
        })?;
        let path = |var: &str, default: &str| env(var).map(PathBuf::from).unwrap_or_else(|| config_dir.join(default));
        let allowlist_path = path(ENV_ALLOWLIST, "allowlist.json");
        let master_key_path = path(ENV_MASTER_KEY, "master.key");
        let data_dir = data_dir(config_dir, &env);
        if !allowlist_path.is_file() {
            return Err(ConfigError::MissingAllowlist(allowlist_path));
        }
        if !master_key_path.is_file() {
            return Err(ConfigError::MissingMasterKey(master_key_path));
        }
        let providers = config_dir.join("providers.json");
        Ok(ServerConfig {
            bind,
            allowlist_path,
            master_key_path,
            data_dir,
            providers_path: providers.is_file().then_some(providers),
            join_delay: DEFAULT_JOIN_DELAY,
            tick: DEFAULT_TICK,
            sync: true,
        })
    }
}

/// One entry of `providers.json`.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ProviderEntry {
    pub id: String,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    /// Header carrying the key; `Authorization: Bearer` when absent.
    #[serde(default)]
    pub key_header: Option<String>,
    /// Scripted provider responses instead of a remote endpoint.
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersFile {
    pub providers: Vec<ProviderEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn missing_allowlist_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = ServerConfig::resolve(dir.path(), |_| None).unwrap_err();
        assert!(err.to_string().contains("allowlist.json"), "{err}");
    }

    #[test]
    fn env_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let allow = dir.path().join("a.json");
        let key = dir.path().join("k");
        std::fs::write(&allow, "{}").unwrap();
        std::fs::write(&key, "00").unwrap();
        let env: HashMap<&str, String> = HashMap::from([
            (ENV_BIND, "0.0.0.0:9000".to_string()),
            (ENV_ALLOWLIST, allow.display().to_string()),
            (ENV_MASTER_KEY, key.display().to_string()),
        ]);
        let cfg = ServerConfig::resolve(dir.path(), |k| env.get(k).cloned()).unwrap();
        assert_eq!(cfg.bind.port(), 9000);
        assert_eq!(cfg.allowlist_path, allow);
        assert_eq!(cfg.data_dir, dir.path().join("data"));
    }

    #[test]
    fn bad_bind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = ServerConfig::resolve(dir.path(), |k| (k == ENV_BIND).then(|| "nope".to_string())).unwrap_err();
        assert!(matches!(err, ConfigError::BadBind { .. }));
    }
}
