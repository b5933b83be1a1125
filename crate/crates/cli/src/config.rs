//! Layered settings: flags > environment > config file > defaults.

use std::path::{Path, PathBuf};

use adsandbox::digest::json_digest;
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const ENV_PREFIX: &str = "ADSANDBOX_";
pub const ENV_CONFIG: &str = "ADSANDBOX_CONFIG";
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

/// Every setting, all optional. The same names are used as long flags, as JSON
/// config keys and (upper-cased, `-` to `_`, prefixed) as environment variables.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    /// Built-in scenario name or path to a scenario JSON file.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    /// Stack directory, or `untrained` for the seeded untrained classifier.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stack: Option<String>,
    /// Attack method (fgsm, bim, pgd, mi_fgsm, random), comma list for attack-eval,
    /// `none`, or a path to an attack config JSON file.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// `sil` or `hil:HOST:PORT`.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub executor: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    /// Dataset size for make-assets and train; test-set size for attack-eval.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Group label written into episode records.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Background agents evolution may mutate or introduce.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_background: Option<usize>,
    /// Endpoint of an external adversary proposer.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposer_url: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposer_timeout_ms: Option<u64>,
}

impl Settings {
    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: Settings) -> Settings {
        let mut base = to_map(&self);
        base.extend(to_map(&over));
        serde_json::from_value(Value::Object(base)).expect("merged settings deserialize")
    }

    pub fn from_file(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Reads `ADSANDBOX_<NAME>` for every setting. Values are parsed as JSON when that
    /// yields the right type and taken as plain strings otherwise.
    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Result<Settings, CliError> {
        let mut out = Map::new();
        for key in setting_names() {
            let var = env_name(&key);
            let Some(raw) = lookup(&var) else { continue };
            let parsed = serde_json::from_str::<Value>(&raw)
                .ok()
                .filter(|v| accepts(&key, v))
                .unwrap_or(Value::String(raw.clone()));
            if !accepts(&key, &parsed) {
                return Err(CliError::Usage(format!("{var}={raw:?} is not a valid {key}")));
            }
            out.insert(key, parsed);
        }
        Ok(serde_json::from_value(Value::Object(out)).expect("checked per key"))
    }
}

fn to_map(s: &Settings) -> Map<String, Value> {
    match serde_json::to_value(s).expect("settings serialize") {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

fn accepts(key: &str, v: &Value) -> bool {
    let mut m = Map::new();
    m.insert(key.to_string(), v.clone());
    serde_json::from_value::<Settings>(Value::Object(m)).is_ok()
}

fn setting_names() -> Vec<String> {
    let probe = Settings {
        scenario: Some(String::new()),
        stack: Some(String::new()),
        attack: Some(String::new()),
        epsilon: Some(0.0),
        alpha: Some(0.0),
        steps: Some(0),
        executor: Some(String::new()),
        seed: Some(0),
        out: Some(PathBuf::new()),
        iterations: Some(0),
        port: Some(0),
        frames: Some(0),
        epochs: Some(0),
        lr: Some(0.0),
        label: Some(String::new()),
        n_background: Some(0),
        proposer_url: Some(String::new()),
        proposer_timeout_ms: Some(0),
    };
    to_map(&probe).into_iter().map(|(k, _)| k).collect()
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('-', "_"))
}

/// Resolves the effective settings for one invocation.
pub fn resolve(
    flags: Settings,
    config_flag: Option<&Path>,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<Settings, CliError> {
    let config_path = config_flag.map(Path::to_path_buf).or_else(|| lookup(ENV_CONFIG).map(PathBuf::from));
    let file = match config_path {
        Some(p) => Settings::from_file(&p)?,
        None => Settings::default(),
    };
    Ok(file.overlay(Settings::from_env(lookup)?).overlay(flags))
}

/// Embedded at the top of every file a subcommand writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHeader {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_digest: String,
    pub config: Value,
}

impl OutputHeader {
    /// `config` is the fully defaulted configuration the command ran with.
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        Self {
            schema_version: OUTPUT_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_digest: json_digest(&config),
            config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let m: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| m.get(k).cloned()
    }

    #[test]
    fn env_names_follow_keys() {
        assert_eq!(env_name("proposer-url"), "ADSANDBOX_PROPOSER_URL");
        assert_eq!(env_name("proposer-timeout-ms"), adsandbox::scenario::proposer::ENV_PROPOSER_TIMEOUT_MS);
        assert_eq!(setting_names().len(), 18);
    }

    #[test]
    fn precedence_is_flags_env_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"seed": 1, "iterations": 5, "scenario": "ego_only", "label": "file"}"#).unwrap();
        let flags = Settings {
            seed: Some(3),
            ..Default::default()
        };
        let lookup = env(&[("ADSANDBOX_SEED", "2"), ("ADSANDBOX_ITERATIONS", "9"), ("ADSANDBOX_LABEL", "123")]);
        let s = resolve(flags, Some(&file), lookup).unwrap();
        assert_eq!(s.seed, Some(3));
        assert_eq!(s.iterations, Some(9));
        assert_eq!(s.scenario.as_deref(), Some("ego_only"));
        assert_eq!(s.label.as_deref(), Some("123"));
        assert_eq!(s.port, None);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        assert!(matches!(Settings::from_env(env(&[("ADSANDBOX_SEED", "soon")])), Err(CliError::Usage(_))));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"sed": 1}"#).unwrap();
        assert!(matches!(Settings::from_file(&file), Err(CliError::Usage(_))));
    }

    #[test]
    fn header_digest_tracks_config() {
        let a = OutputHeader::new("run", &serde_json::json!({"seed": 1}));
        let b = OutputHeader::new("run", &serde_json::json!({"seed": 2}));
        assert_ne!(a.config_digest, b.config_digest);
        assert_eq!(a, OutputHeader::new("run", &serde_json::json!({"seed": 1})));
    }
}
