//! Flat `key = value` gateway configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::domain::ThreatKind;
use crate::dos_guard::RateLimitConfig;
use crate::ids_breaker::DetectionPolicy;
use crate::ims::ImsConfig;
use crate::rules::DEFAULT_BODY_LIMIT;
use crate::sanitizer::SanitizationPolicy;

use super::permissions::{ClassDirectory, PermissionTable};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("invalid value for {key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen_public: SocketAddr,
    pub listen_admin: SocketAddr,
    pub ims_key: PathBuf,
    pub principals: Option<PathBuf>,
    pub ims: ImsConfig,
    pub vault_key: PathBuf,
    pub vault_store: PathBuf,
    /// Rule file; the built-in starter pack when unset.
    pub rules: Option<PathBuf>,
    pub body_limit: usize,
    /// Action registry file; the built-in registry when unset.
    pub registry: Option<PathBuf>,
    pub audit_file: Option<PathBuf>,
    pub sanitization: SanitizationPolicy,
    pub rate_limit: RateLimitConfig,
    pub detection: DetectionPolicy,
    pub trip_notify: Option<PathBuf>,
    pub permissions: PermissionTable,
    pub classes: ClassDirectory,
    /// Mounted mock services and the actions each one serves. Services not
    /// listed are mounted with all their actions.
    pub services: BTreeMap<String, Vec<String>>,
}

const SIMPLE_KEYS: &[&str] = &[
    "listen.public",
    "listen.admin",
    "ims.key",
    "ims.principals",
    "ims.min_secret_len",
    "ims.hash_rounds",
    "ims.max_ttl_ms",
    "ims.service_ttl_ms",
    "vault.key",
    "vault.store",
    "rules",
    "rules.body_limit",
    "registry",
    "audit.file",
    "sanitize.preset",
    "sanitize.allowed",
    "sanitize.strategy",
    "sanitize.case",
    "sanitize.targets",
    "sanitize.report",
    "dos.max_requests",
    "dos.window_ms",
    "dos.ban_ms",
    "dos.max_sources",
    "ids.threshold",
    "ids.window_ms",
    "ids.cooldown_ms",
    "ids.watched",
    "ids.notify",
];

fn known_key(key: &str) -> bool {
    SIMPLE_KEYS.contains(&key)
        || key.strip_prefix("permit.").is_some_and(|f| !f.is_empty())
        || key.strip_prefix("class.").is_some_and(|c| !c.is_empty())
        || key
            .strip_prefix("services.")
            .and_then(|r| r.strip_suffix(".actions"))
            .is_some_and(|s| !s.is_empty())
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

struct Values {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Values {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::Invalid {
                key: key.to_string(),
                message: e.to_string(),
            }),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.base.join(v))
    }

    fn required_path(&self, key: &'static str) -> Result<PathBuf, ConfigError> {
        self.path(key).ok_or(ConfigError::Missing(key))
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

fn sanitization(v: &Values) -> Result<SanitizationPolicy, ConfigError> {
    let preset = match v.get("sanitize.preset").unwrap_or("production") {
        "production" => SanitizationPolicy::production(),
        "paper-compat" => SanitizationPolicy::paper_compat(),
        other => return Err(invalid("sanitize.preset", format!("unknown preset {other:?}"))),
    };
    let custom = ["sanitize.allowed", "sanitize.strategy", "sanitize.case", "sanitize.targets"];
    let policy = if custom.iter().any(|k| v.get(k).is_some()) {
        if v.get("sanitize.preset").is_some() {
            return Err(invalid("sanitize.preset", "cannot be combined with custom sanitize keys"));
        }
        SanitizationPolicy::from_config(
            v.get("sanitize.allowed").unwrap_or("alnum"),
            v.get("sanitize.strategy").unwrap_or("strip"),
            v.get("sanitize.case").unwrap_or("preserve"),
            v.get("sanitize.targets").unwrap_or("query,body"),
        )
        .map_err(|e| invalid("sanitize", e.to_string()))?
    } else {
        preset
    };
    Ok(policy.with_reporting(v.parse("sanitize.report", false)?))
}

impl GatewayConfig {
    /// Parses config text. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !known_key(key) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::DuplicateKey {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
        }
        let v = Values {
            map,
            base: base_dir.to_path_buf(),
        };

        let ims_defaults = ImsConfig::default();
        let ims = ImsConfig {
            min_secret_len: v.parse("ims.min_secret_len", ims_defaults.min_secret_len)?,
            hash_rounds: v.parse("ims.hash_rounds", ims_defaults.hash_rounds)?,
            max_ttl_ms: v.parse("ims.max_ttl_ms", ims_defaults.max_ttl_ms)?,
            service_ttl_ms: v.parse("ims.service_ttl_ms", ims_defaults.service_ttl_ms)?,
        };
        if ims.hash_rounds == 0 {
            return Err(invalid("ims.hash_rounds", "must be positive"));
        }

        let rl = RateLimitConfig::default();
        let rate_limit = RateLimitConfig {
            max_requests: v.parse("dos.max_requests", rl.max_requests)?,
            window_ms: v.parse("dos.window_ms", rl.window_ms)?,
            ban_ms: v.parse("dos.ban_ms", rl.ban_ms)?,
            max_tracked_sources: v.parse("dos.max_sources", rl.max_tracked_sources)?,
        };
        rate_limit.validate().map_err(|e| invalid("dos", e.to_string()))?;

        let dp = DetectionPolicy::default();
        let watched = match v.get("ids.watched") {
            None => dp.watched.clone(),
            Some(s) => list(s)
                .iter()
                .map(|k| k.parse::<ThreatKind>())
                .collect::<Result<BTreeSet<_>, _>>()
                .map_err(|e| invalid("ids.watched", e.to_string()))?,
        };
        let detection = DetectionPolicy {
            threshold: v.parse("ids.threshold", dp.threshold)?,
            window_ms: v.parse("ids.window_ms", dp.window_ms)?,
            cooldown_ms: v.parse("ids.cooldown_ms", dp.cooldown_ms)?,
            watched,
        };
        detection.validate().map_err(|e| invalid("ids", e.to_string()))?;

        let mut permissions = PermissionTable::new();
        let mut classes = ClassDirectory::new();
        let mut services = BTreeMap::new();
        for (key, value) in &v.map {
            if let Some(function) = key.strip_prefix("permit.") {
                for class in list(value) {
                    permissions.set(function, &class, true);
                }
            } else if let Some(class) = key.strip_prefix("class.") {
                for principal in list(value) {
                    classes.add(class, &principal);
                }
            } else if let Some(name) = key.strip_prefix("services.").and_then(|r| r.strip_suffix(".actions")) {
                services.insert(name.to_ascii_lowercase(), list(value));
            }
        }

        let addr = |key: &str, default: &str| -> Result<SocketAddr, ConfigError> {
            v.get(key)
                .unwrap_or(default)
                .parse()
                .map_err(|e: std::net::AddrParseError| invalid(key, e.to_string()))
        };

        Ok(Self {
            listen_public: addr("listen.public", "127.0.0.1:8080")?,
            listen_admin: addr("listen.admin", "127.0.0.1:8081")?,
            ims_key: v.required_path("ims.key")?,
            principals: v.path("ims.principals"),
            ims,
            vault_key: v.required_path("vault.key")?,
            vault_store: v.required_path("vault.store")?,
            rules: v.path("rules"),
            body_limit: v.parse("rules.body_limit", DEFAULT_BODY_LIMIT)?,
            registry: v.path("registry"),
            audit_file: v.path("audit.file"),
            sanitization: sanitization(&v)?,
            rate_limit,
            detection,
            trip_notify: v.path("ids.notify"),
            permissions,
            classes,
            services,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }
}
