//! Layered run configuration for the command-line tool.
//!
//! A setting can come from four places; higher layers win:
//!
//! 1. command-line flags
//! 2. environment variables (`CARM_` plus the key in upper snake case,
//!    e.g. `n-candidates` → `CARM_N_CANDIDATES`)
//! 3. a flat key-value config file (`key = value` lines, `#` comments)
//! 4. built-in defaults
//!
//! Every key is validated before any stage runs: unknown or duplicate
//! config-file keys and unparseable values are errors, and the error names
//! the key and the layer the bad value came from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::client::BackendConfig;
use crate::dataset::RefinementMode;
use crate::pipeline::PipelineConfig;
use crate::scoring;

/// Every key the config file, environment, and flags may set.
pub const KNOWN_KEYS: [&str; 16] = [
    "seed",
    "refinement",
    "n-candidates",
    "top-k",
    "min-parsed",
    "gen-temperature",
    "m",
    "temperature",
    "bind",
    "backend",
    "fixture",
    "endpoint",
    "auth-token-env",
    "max-inflight",
    "retry-limit",
    "timeout-ms",
];

/// Where completions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    /// Replay scripted responses from a fixture file; fully offline.
    Scripted,
    /// POST to a remote completion endpoint.
    Remote,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Scripted => "scripted",
            BackendKind::Remote => "remote",
        }
    }
}

/// The fully resolved configuration, after all four layers are merged.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub refinement: RefinementMode,
    pub n_candidates: usize,
    pub top_k: usize,
    pub min_parsed: usize,
    /// Sampling temperature for pipeline candidate generation.
    pub gen_temperature: f64,
    /// Number of critiques to average over when scoring.
    pub m: usize,
    /// Sampling temperature for scoring-time critique generation.
    pub temperature: f64,
    pub bind: String,
    pub backend: BackendKind,
    pub fixture: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub auth_token_env: Option<String>,
    pub max_inflight: usize,
    pub retry_limit: usize,
    pub timeout_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        let backend = BackendConfig::default();
        Self {
            seed: 0,
            refinement: pipeline.refinement,
            n_candidates: pipeline.n_candidates,
            top_k: pipeline.top_k,
            min_parsed: pipeline.min_parsed,
            gen_temperature: pipeline.gen_temperature,
            m: scoring::DEFAULT_M,
            temperature: scoring::DEFAULT_TEMPERATURE,
            bind: "127.0.0.1:8080".to_string(),
            backend: BackendKind::Scripted,
            fixture: None,
            endpoint: None,
            auth_token_env: backend.auth_token_env,
            max_inflight: backend.max_inflight,
            retry_limit: backend.retry_limit,
            timeout_ms: backend.timeout_ms,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}:{line}: expected `key = value`, got {text:?}")]
    Syntax {
        path: String,
        line: usize,
        text: String,
    },
    #[error("{path}:{line}: unknown config key {key:?}")]
    UnknownKey {
        path: String,
        line: usize,
        key: String,
    },
    #[error("{path}:{line}: duplicate config key {key:?}")]
    DuplicateKey {
        path: String,
        line: usize,
        key: String,
    },
    #[error("invalid value {value:?} for {key} (from {layer}): {message}")]
    BadValue {
        key: &'static str,
        value: String,
        layer: String,
        message: String,
    },
    #[error("backend \"remote\" requires {key} to be set")]
    MissingForRemote { key: &'static str },
}

/// Environment variable that overrides `key`.
pub fn env_key(key: &str) -> String {
    format!("CARM_{}", key.to_uppercase().replace('-', "_"))
}

/// Parses a flat `key = value` config file. Blank lines and lines starting
/// with `#` are ignored; keys must be known and appear at most once.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: display.clone(),
        message: e.to_string(),
    })?;
    parse_config_text(&display, &raw)
}

fn parse_config_text(path: &str, raw: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut values = BTreeMap::new();
    for (index, line) in raw.lines().enumerate() {
        let line_no = index + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Syntax {
                path: path.to_string(),
                line: line_no,
                text: trimmed.to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                path: path.to_string(),
                line: line_no,
                key: key.to_string(),
            });
        }
        if values.insert(key.to_string(), value.to_string()).is_some() {
            return Err(ConfigError::DuplicateKey {
                path: path.to_string(),
                line: line_no,
                key: key.to_string(),
            });
        }
    }
    Ok(values)
}

struct Raw {
    value: String,
    layer: String,
}

/// Merges the four layers and parses every present key into a typed
/// [`RunConfig`]. `flags` holds only the flags the user actually passed;
/// `env` is injected so tests can run hermetically.
pub fn resolve(
    flags: &[(&'static str, String)],
    env: impl Fn(&str) -> Option<String>,
    file_values: &BTreeMap<String, String>,
) -> Result<RunConfig, ConfigError> {
    let mut merged: BTreeMap<&'static str, Raw> = BTreeMap::new();
    for key in KNOWN_KEYS {
        if let Some(value) = file_values.get(key) {
            merged.insert(
                key,
                Raw {
                    value: value.clone(),
                    layer: "config file".to_string(),
                },
            );
        }
        let var = env_key(key);
        if let Some(value) = env(&var) {
            merged.insert(
                key,
                Raw {
                    value,
                    layer: format!("environment variable {var}"),
                },
            );
        }
    }
    for (key, value) in flags {
        debug_assert!(KNOWN_KEYS.contains(key), "unknown flag key {key}");
        merged.insert(
            key,
            Raw {
                value: value.clone(),
                layer: format!("flag --{key}"),
            },
        );
    }

    let mut cfg = RunConfig::default();
    for (key, raw) in &merged {
        apply(&mut cfg, key, raw)?;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, key: &'static str, raw: &Raw) -> Result<(), ConfigError> {
    let bad = |message: String| ConfigError::BadValue {
        key,
        value: raw.value.clone(),
        layer: raw.layer.clone(),
        message,
    };
    let value = raw.value.as_str();
    match key {
        "seed" => cfg.seed = value.parse().map_err(|e| bad(format!("{e}")))?,
        "refinement" => {
            cfg.refinement = match value {
                "summ" => RefinementMode::Summ,
                "rank" => RefinementMode::Rank,
                _ => return Err(bad("expected \"summ\" or \"rank\"".to_string())),
            }
        }
        "n-candidates" => cfg.n_candidates = parse_nonzero(value).map_err(bad)?,
        "top-k" => cfg.top_k = parse_nonzero(value).map_err(bad)?,
        "min-parsed" => cfg.min_parsed = parse_nonzero(value).map_err(bad)?,
        "gen-temperature" => cfg.gen_temperature = parse_temperature(value).map_err(bad)?,
        "m" => cfg.m = parse_nonzero(value).map_err(bad)?,
        "temperature" => cfg.temperature = parse_temperature(value).map_err(bad)?,
        "bind" => cfg.bind = value.to_string(),
        "backend" => {
            cfg.backend = match value {
                "scripted" => BackendKind::Scripted,
                "remote" => BackendKind::Remote,
                _ => return Err(bad("expected \"scripted\" or \"remote\"".to_string())),
            }
        }
        "fixture" => cfg.fixture = Some(PathBuf::from(value)),
        "endpoint" => cfg.endpoint = Some(value.to_string()),
        "auth-token-env" => cfg.auth_token_env = Some(value.to_string()),
        "max-inflight" => cfg.max_inflight = parse_nonzero(value).map_err(bad)?,
        "retry-limit" => cfg.retry_limit = value.parse().map_err(|e| bad(format!("{e}")))?,
        "timeout-ms" => {
            cfg.timeout_ms = value
                .parse()
                .map_err(|e| bad(format!("{e}")))
                .and_then(|v: u64| {
                    if v == 0 {
                        Err(bad("must be >= 1".to_string()))
                    } else {
                        Ok(v)
                    }
                })?
        }
        _ => unreachable!("apply covers every known key"),
    }
    Ok(())
}

fn parse_nonzero(value: &str) -> Result<usize, String> {
    let parsed: usize = value.parse().map_err(|e| format!("{e}"))?;
    if parsed == 0 {
        return Err("must be >= 1".to_string());
    }
    Ok(parsed)
}

fn parse_temperature(value: &str) -> Result<f64, String> {
    let parsed: f64 = value.parse().map_err(|e| format!("{e}"))?;
    if !parsed.is_finite() || parsed < 0.0 {
        return Err(format!("must be finite and >= 0, got {parsed}"));
    }
    Ok(parsed)
}

impl RunConfig {
    /// The pipeline view of this configuration.
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            n_candidates: self.n_candidates,
            gen_temperature: self.gen_temperature,
            top_k: self.top_k,
            refinement: self.refinement,
            min_parsed: self.min_parsed,
            seed: self.seed,
            ..PipelineConfig::default()
        }
    }

    /// The remote-backend view; requires `endpoint` when the backend is
    /// remote.
    pub fn backend_config(&self) -> Result<BackendConfig, ConfigError> {
        let endpoint = self
            .endpoint
            .clone()
            .ok_or(ConfigError::MissingForRemote { key: "endpoint" })?;
        Ok(BackendConfig {
            endpoint,
            auth_token_env: self.auth_token_env.clone(),
            max_inflight: self.max_inflight,
            retry_limit: self.retry_limit,
            timeout_ms: self.timeout_ms,
            ..BackendConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_apply_when_nothing_is_set() {
        let cfg = resolve(&[], no_env, &BTreeMap::new()).expect("resolves");
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.n_candidates, 10);
        assert_eq!(cfg.m, 1);
        assert_eq!(cfg.temperature, 0.95);
        assert_eq!(cfg.backend, BackendKind::Scripted);
    }

    #[test]
    fn config_files_support_comments_blanks_and_spacing() {
        let values = parse_config_text(
            "test.conf",
            "# a comment\n\nseed = 9\n  top-k=3  \nrefinement = summ\n",
        )
        .expect("parses");
        assert_eq!(values.get("seed").map(String::as_str), Some("9"));
        assert_eq!(values.get("top-k").map(String::as_str), Some("3"));
        assert_eq!(values.get("refinement").map(String::as_str), Some("summ"));
    }

    #[test]
    fn unknown_duplicate_and_malformed_config_lines_are_rejected() {
        assert!(matches!(
            parse_config_text("t", "volume = 11\n"),
            Err(ConfigError::UnknownKey { key, line: 1, .. }) if key == "volume"
        ));
        assert!(matches!(
            parse_config_text("t", "seed = 1\nseed = 2\n"),
            Err(ConfigError::DuplicateKey { key, line: 2, .. }) if key == "seed"
        ));
        assert!(matches!(
            parse_config_text("t", "seed : 1\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn flags_beat_env_beats_file_beats_default() {
        let mut file = BTreeMap::new();
        file.insert("seed".to_string(), "1".to_string());
        let env = |var: &str| (var == "CARM_SEED").then(|| "2".to_string());
        let flags = [("seed", "3".to_string())];

        let all = resolve(&flags, env, &file).expect("resolves");
        assert_eq!(all.seed, 3);
        let no_flag = resolve(&[], env, &file).expect("resolves");
        assert_eq!(no_flag.seed, 2);
        let file_only = resolve(&[], no_env, &file).expect("resolves");
        assert_eq!(file_only.seed, 1);
        let nothing = resolve(&[], no_env, &BTreeMap::new()).expect("resolves");
        assert_eq!(nothing.seed, 0);
    }

    #[test]
    fn env_key_mapping_uses_upper_snake_case() {
        assert_eq!(env_key("n-candidates"), "CARM_N_CANDIDATES");
        assert_eq!(env_key("seed"), "CARM_SEED");
        assert_eq!(env_key("auth-token-env"), "CARM_AUTH_TOKEN_ENV");
    }

    #[test]
    fn bad_values_name_the_key_and_the_layer() {
        let mut file = BTreeMap::new();
        file.insert("seed".to_string(), "banana".to_string());
        match resolve(&[], no_env, &file).unwrap_err() {
            ConfigError::BadValue { key, layer, .. } => {
                assert_eq!(key, "seed");
                assert_eq!(layer, "config file");
            }
            other => panic!("expected BadValue, got {other}"),
        }
        let env = |var: &str| (var == "CARM_M").then(|| "0".to_string());
        match resolve(&[], env, &BTreeMap::new()).unwrap_err() {
            ConfigError::BadValue { key, layer, .. } => {
                assert_eq!(key, "m");
                assert!(layer.contains("CARM_M"), "layer was {layer}");
            }
            other => panic!("expected BadValue, got {other}"),
        }
    }

    #[test]
    fn enumerated_keys_reject_unknown_values() {
        let flags = [("refinement", "best".to_string())];
        assert!(matches!(
            resolve(&flags, no_env, &BTreeMap::new()),
            Err(ConfigError::BadValue { key: "refinement", .. })
        ));
        let flags = [("backend", "local".to_string())];
        assert!(matches!(
            resolve(&flags, no_env, &BTreeMap::new()),
            Err(ConfigError::BadValue { key: "backend", .. })
        ));
    }

    #[test]
    fn pipeline_view_carries_the_resolved_values() {
        let flags = [
            ("seed", "5".to_string()),
            ("n-candidates", "6".to_string()),
            ("top-k", "3".to_string()),
            ("refinement", "summ".to_string()),
        ];
        let cfg = resolve(&flags, no_env, &BTreeMap::new()).expect("resolves");
        let pipeline = cfg.pipeline_config();
        assert_eq!(pipeline.seed, 5);
        assert_eq!(pipeline.n_candidates, 6);
        assert_eq!(pipeline.top_k, 3);
        assert_eq!(pipeline.refinement, RefinementMode::Summ);
        assert!(pipeline.validate().is_ok());
    }

    #[test]
    fn remote_backend_requires_an_endpoint() {
        let cfg = resolve(&[], no_env, &BTreeMap::new()).expect("resolves");
        assert!(matches!(
            cfg.backend_config(),
            Err(ConfigError::MissingForRemote { key: "endpoint" })
        ));
        let flags = [("endpoint", "http://10.0.0.5:9000/v1/complete".to_string())];
        let cfg = resolve(&flags, no_env, &BTreeMap::new()).expect("resolves");
        let backend = cfg.backend_config().expect("backend config");
        assert_eq!(backend.endpoint, "http://10.0.0.5:9000/v1/complete");
        assert!(backend.validate().is_ok());
    }
}
