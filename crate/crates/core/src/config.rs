//! Run configuration: built-in defaults, then a JSON file, then flag
//! overrides. Unknown keys anywhere in the file are rejected by dotted
//! path. A file may give any subset of keys; lists of named entries
//! (`tier1.workloads`, `tier2.scenarios`) select the entries listed, each
//! merged over the default entry of the same name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::report::{Targets, DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use crate::tier1::{Policy, Tier1Config};
use crate::tier2::{ScenarioName, Tier2Config};

pub const OUT_ENV: &str = "MAESTROCUT_OUT";
pub const DEFAULT_OUT_ROOT: &str = "out";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config `{path}`: {msg}")]
    Type { path: String, msg: String },
    #[error("cannot read config {path}: {msg}")]
    Unreadable { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub targets: Targets,
    pub resamples: usize,
    pub level: f64,
    /// Minimum Tier-2 episodes behind each SLO entry.
    pub min_episodes: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            targets: Targets::default(),
            resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            min_episodes: crate::tier2::MIN_SLO_EPISODES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_root: String,
    pub tier1: Tier1Config,
    pub tier2: Tier2Config,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_root: DEFAULT_OUT_ROOT.into(),
            tier1: Tier1Config::default(),
            tier2: Tier2Config::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Command-line overrides; `None` leaves the file or default value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Tier-1 seeds per workload and Tier-2 episodes per scenario.
    pub seeds: Option<usize>,
    pub out: Option<String>,
    pub scenario: Option<ScenarioName>,
    pub policy: Option<Policy>,
    pub overhead: Option<f64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.tier1.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tier2.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.tier1.workload(self.tier1.reference_workload).is_err() {
            return Err(ConfigError::Invalid(format!(
                "reference workload {} not in tier1.workloads",
                self.tier1.reference_workload
            )));
        }
        if self.report.resamples == 0 || !(self.report.level > 0.0 && self.report.level < 1.0) {
            return Err(ConfigError::Invalid("report.resamples must be positive and report.level in (0, 1)".into()));
        }
        Ok(())
    }

    /// Deterministic id from the seed and everything that shapes results
    /// (the output root is excluded).
    pub fn run_id(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out_root");
        }
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("config serializes"));
        format!("seed{}-{}", self.seed, hex::encode(&digest[..6]))
    }

    pub fn out_dir(&self) -> std::path::PathBuf {
        Path::new(&self.out_root).join(self.run_id())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(n) = o.seeds {
            self.tier1.seeds = n;
            self.tier2.episodes = n;
        }
        if let Some(out) = &o.out {
            self.out_root = out.clone();
        }
        if let Some(name) = o.scenario {
            self.tier2.scenarios.retain(|s| s.name == name);
            if self.tier2.scenarios.is_empty() {
                return Err(ConfigError::Invalid(format!("scenario {name} not configured")));
            }
        }
        if let Some(p) = o.policy {
            self.tier1.policies = vec![p];
        }
        if let Some(x) = o.overhead {
            self.tier2.overhead = x;
        }
        Ok(())
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn name_of(v: &Value) -> Option<&str> {
    v.get("name").and_then(Value::as_str)
}

/// Overlay `user` onto `base`, rejecting keys that `base` does not have.
/// Keys whose base value is `null` (optional sections) take the user value
/// unchecked; their contents are checked on deserialization.
fn overlay(base: &mut Value, user: Value, path: &str) -> Result<(), ConfigError> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let p = join(path, &k);
                match b.get_mut(&k) {
                    None => return Err(ConfigError::UnknownKey(p)),
                    Some(slot) => overlay(slot, v, &p)?,
                }
            }
            Ok(())
        }
        (Value::Array(b), Value::Array(u)) if b.iter().all(|x| name_of(x).is_some()) && !b.is_empty() => {
            let mut out = Vec::with_capacity(u.len());
            for (i, item) in u.into_iter().enumerate() {
                let p = format!("{path}[{i}]");
                let default = name_of(&item).and_then(|n| b.iter().find(|x| name_of(x) == Some(n)));
                match (default, item) {
                    (Some(d), item @ Value::Object(_)) => {
                        let mut d = d.clone();
                        overlay(&mut d, item, &p)?;
                        out.push(d);
                    }
                    (_, item) => out.push(item),
                }
            }
            *b = out;
            Ok(())
        }
        (slot, u) => {
            *slot = u;
            Ok(())
        }
    }
}

/// Defaults overlaid with a parsed JSON document.
pub fn from_json(base: &RunConfig, user: Value) -> Result<RunConfig, ConfigError> {
    if !user.is_object() {
        return Err(ConfigError::Type {
            path: String::new(),
            msg: "top level must be an object".into(),
        });
    }
    let mut tree = serde_json::to_value(base).expect("config serializes");
    overlay(&mut tree, user, "")?;
    serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.into_inner().to_string();
        match msg.strip_prefix("unknown field `") {
            Some(rest) => ConfigError::UnknownKey(join(&path, rest.split('`').next().unwrap_or(rest))),
            None => ConfigError::Type { path, msg },
        }
    })
}

/// Resolve with precedence flags > file > environment output root > defaults.
pub fn resolve_config(file: Option<&Path>, overrides: &Overrides, env_out: Option<String>) -> Result<RunConfig, ConfigError> {
    let mut base = RunConfig::default();
    if let Some(out) = env_out.filter(|s| !s.is_empty()) {
        base.out_root = out;
    }
    let mut cfg = match file {
        None => base,
        Some(path) => {
            let unreadable = |msg: String| ConfigError::Unreadable {
                path: path.display().to_string(),
                msg,
            };
            let text = std::fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
            let user: Value = serde_json::from_str(&text).map_err(|e| unreadable(e.to_string()))?;
            from_json(&base, user)?
        }
    };
    cfg.apply(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a config echo back into a run config.
pub fn from_echo(text: &str) -> Result<RunConfig, ConfigError> {
    let v: Map<String, Value> = serde_json::from_str(text).map_err(|e| ConfigError::Unreadable {
        path: crate::report::CONFIG_ECHO_JSON.into(),
        msg: e.to_string(),
    })?;
    from_json(&RunConfig::default(), Value::Object(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_are_valid() {
        let cfg = resolve_config(None, &Overrides::default(), None).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_named() {
        let e = from_json(&RunConfig::default(), json!({"tier9": {"x": 1}})).unwrap_err();
        assert!(e.to_string().contains("tier9"), "{e}");
        let e = from_json(&RunConfig::default(), json!({"tier1": {"kalman": {"bogus": 1}}})).unwrap_err();
        assert!(e.to_string().contains("tier1.kalman.bogus"), "{e}");
        let e = from_json(
            &RunConfig::default(),
            json!({"tier2": {"scenarios": [{"name": "Bursty", "burst": {"on_rate_hz": 1.0, "off_rate_hz": 1.0, "mean_on_ms": 1.0, "mean_off_ms": 1.0, "zap": 2}}]}}),
        )
        .unwrap_err();
        assert!(e.to_string().contains("zap"), "{e}");
    }

    #[test]
    fn named_lists_merge_by_name() {
        let cfg = from_json(&RunConfig::default(), json!({"tier2": {"scenarios": [{"name": "Adversarial", "error_rate": 0.03}]}})).unwrap();
        assert_eq!(cfg.tier2.scenarios.len(), 1);
        assert_eq!(cfg.tier2.scenarios[0].error_rate, 0.03);
        assert!(cfg.tier2.scenarios[0].injection.is_some());
    }

    #[test]
    fn type_mismatch_has_path() {
        let e = from_json(&RunConfig::default(), json!({"tier1": {"steps": "many"}})).unwrap_err();
        assert!(matches!(&e, ConfigError::Type { path, .. } if path == "tier1.steps"), "{e}");
    }

    #[test]
    fn run_id_ignores_out_root() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_root: "elsewhere".into(),
            ..RunConfig::default()
        };
        assert_eq!(a.run_id(), b.run_id());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.run_id(), c.run_id());
    }
}
