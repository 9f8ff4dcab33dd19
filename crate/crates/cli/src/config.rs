//! `section.key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Syntax { path: String, line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("duplicate config key `{key}` in {path}")]
    Duplicate { path: String, key: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid { key: key.to_string(), message: message.into() }
    }
}

/// Every accepted key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("data.kind", "synthetic"),
    ("data.path", ""),
    ("data.seed", "0"),
    ("data.classes", "3"),
    ("data.n_per_class", "512"),
    ("data.test_per_class", "200"),
    ("data.image_size", "16"),
    ("data.val_fraction", "0.1"),
    ("data.normalize", "false"),
    ("data.limit_train", "0"),
    ("data.limit_test", "0"),
    ("model.path", ""),
    ("model.nit_path", ""),
    ("model.init_seed", "0"),
    ("train.epochs", "6"),
    ("train.batch_size", "32"),
    ("train.lr", "0.05"),
    ("train.schedule", "cosine"),
    ("train.sgd_momentum", "0.9"),
    ("train.weight_decay", "0.0005"),
    ("train.seed", "0"),
    ("train.init", ""),
    ("train.noise_injection", "false"),
    ("noise.kind", "mul"),
    ("noise.eta0", "0.1"),
    ("noise.sigma_t_ratio", "0.2"),
    ("noise.sigma_s", "0.1"),
    ("noise.seed", "0"),
    ("noise.temporal_granularity", "global"),
    ("noise.noise_biases", "false"),
    ("calib.momentum", "0.999"),
    ("calib.passes", "1"),
    ("calib.batch_size", "32"),
    ("calib.dynamic", "false"),
    ("calib.dynamic_scoring", "pre_update"),
    ("calib.allow_test_split", "false"),
    ("calib.output_model", ""),
    ("diag.bins", "256"),
    ("diag.smoothing", "1"),
    ("diag.batch_size", "100"),
    ("diag.samples", "1000"),
    ("sweep.scales", "0.02,0.04,0.06,0.08,0.10"),
    ("sweep.seeds", "0,1,2"),
    ("sweep.variants", "vanilla,nabn,nabn_dynamic"),
    ("sweep.nit_scale", "0.06"),
    ("sweep.eval_batch_size", "32"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

/// Fully resolved configuration: every known key has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn split_assignment(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Self { values }
    }
}

impl RunConfig {
    /// Parses config text. `#` starts a comment line; blank lines are ignored.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: &str| ConfigError::Syntax { path: origin.to_string(), line: i + 1, message: message.into() };
            let (key, value) = split_assignment(line).ok_or_else(|| syntax("expected `section.key = value`"))?;
            if !key.contains('.') {
                return Err(syntax("keys have the form `section.key`"));
            }
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(ConfigError::Duplicate { path: origin.to_string(), key: key.to_string() });
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if default_of(key).is_none() {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `--set section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = split_assignment(assignment).ok_or_else(|| ConfigError::Syntax {
            path: "--set".into(),
            line: 0,
            message: format!("expected section.key=value, got {assignment:?}"),
        })?;
        self.set(k, v)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>().map_err(|e| ConfigError::invalid(key, format!("cannot parse {raw:?}: {e}")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(ConfigError::invalid(key, format!("expected true or false, got {other:?}"))),
        }
    }

    /// Comma-separated list, optionally wrapped in brackets.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key).trim();
        let inner = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')).unwrap_or(raw);
        inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| ConfigError::invalid(key, format!("cannot parse {s:?}: {e}"))))
            .collect()
    }

    /// Non-empty string value, or an error naming the key.
    pub fn required(&self, key: &str) -> Result<&str, ConfigError> {
        match self.raw(key) {
            "" => Err(ConfigError::invalid(key, "required but not set")),
            v => Ok(v),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical `key = value` lines, sorted by key.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# comment\n\nnoise.eta0 = 0.05\nsweep.scales = [0.02, 0.04]\n";
        let mut cfg = RunConfig::parse(text, "t.cfg").unwrap();
        assert_eq!(cfg.get::<f64>("noise.eta0").unwrap(), 0.05);
        assert_eq!(cfg.get_list::<f64>("sweep.scales").unwrap(), vec![0.02, 0.04]);
        cfg.apply_override("noise.eta0=0.2").unwrap();
        assert_eq!(cfg.get::<f64>("noise.eta0").unwrap(), 0.2);
        assert_eq!(cfg.raw("calib.momentum"), "0.999");
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        assert!(matches!(RunConfig::parse("noise.eta = 1", "x"), Err(ConfigError::UnknownKey(k)) if k == "noise.eta"));
        assert!(matches!(RunConfig::parse("just words", "x"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("noise.eta0=1\nnoise.eta0=2", "x"), Err(ConfigError::Duplicate { .. })));
        assert!(RunConfig::default().apply_override("train.lrr=1").is_err());
        let cfg = RunConfig::parse("train.epochs = many", "x").unwrap();
        let err = cfg.get::<usize>("train.epochs").unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.sha256(), b.sha256());
        b.set("noise.seed", "4").unwrap();
        assert_ne!(a.sha256(), b.sha256());
        assert_eq!(a.sha256().len(), 64);
    }
}
