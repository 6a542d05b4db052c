//! Run configuration. Values resolve as command-line flags over the config
//! file over built-in defaults; the resolved document is written next to
//! every command's outputs as `config.json`.

use std::path::{Path, PathBuf};

use nahw_core::arabic::NormalizationPolicy;
use nahw_core::eval::PerturbationConfig;
use nahw_core::lora::LoraConfig;
use nahw_core::model::ModelConfig;
use nahw_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};
use crate::fsutil;

pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    /// Seeds training, initialization and perturbation.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub log_level: String,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            log_level: "info".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    pub input: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// Reuse an existing `tokenizer.json` instead of training one.
    pub tokenizer: Option<PathBuf>,
    pub policy: NormalizationPolicy,
    pub presegment: bool,
    pub vocab_size: usize,
    pub docs_per_shard: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            input: None,
            lexicon: None,
            tokenizer: None,
            policy: NormalizationPolicy::default(),
            presegment: true,
            vocab_size: 8192,
            docs_per_shard: 1024,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub shards: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    pub stage: Option<String>,
    pub dialect: Option<String>,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub compare: Option<PathBuf>,
    /// Tokenizer used to encode eval text; must match the checkpoint's.
    pub tokenizer: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub mt: Option<PathBuf>,
    pub robustness: Option<PathBuf>,
    pub perturbation: PerturbationConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub global: GlobalConfig,
    pub prep: PrepConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses,
/// otherwise as a plain string.
pub fn parse_assignment(s: &str) -> Result<Value> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {s:?} is not of the form key.path=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override {s:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(key
        .rsplit('.')
        .fold(value, |acc, k| Value::Object([(k.to_string(), acc)].into_iter().collect())))
}

impl RunConfig {
    /// Defaults, then `file`, then each layer of `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: Vec<Value>) -> Result<RunConfig> {
        let mut v = serde_json::to_value(RunConfig::default()).expect("serializable defaults");
        if let Some(p) = file {
            let text = fsutil::read_string(p)?;
            let fv: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            if !fv.is_object() {
                return Err(CliError::Config(format!("{}: top level must be an object", p.display())));
            }
            merge(&mut v, fv);
        }
        for o in overrides {
            merge(&mut v, o);
        }
        let mut cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train.train.seed = cfg.global.seed;
        cfg.eval.perturbation.seed = cfg.global.seed;
        Ok(cfg)
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        fsutil::write_json(&dir.join(CONFIG_ECHO), self)
    }

    pub fn to_compact_json(&self) -> String {
        serde_json::to_string(self).expect("serializable config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn precedence_is_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"global":{"seed":7},"train":{"train":{"lr_max":0.01,"total_steps":50}}}"#).unwrap();
        let flags = vec![parse_assignment("train.train.lr_max=0.02").unwrap(), json!({"global": {"seed": 9}})];
        let c = RunConfig::resolve(Some(&p), flags).unwrap();
        assert_eq!(c.train.train.lr_max, 0.02);
        assert_eq!(c.train.train.total_steps, 50);
        assert_eq!(c.train.train.warmup_steps, TrainConfig::default().warmup_steps);
        assert_eq!((c.global.seed, c.train.train.seed, c.eval.perturbation.seed), (9, 9, 9));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for bad in ["train.train.lr=1", "nope=1", "prep.policy.unify_hamza=true"] {
            let e = RunConfig::resolve(None, vec![parse_assignment(bad).unwrap()]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
        assert!(parse_assignment("novalue").is_err());
        assert!(parse_assignment("a..b=1").is_err());
    }

    #[test]
    fn echo_reproduces_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::resolve(None, vec![parse_assignment("prep.vocab_size=300").unwrap()]).unwrap();
        c.write_echo(dir.path()).unwrap();
        let back = RunConfig::resolve(Some(&dir.path().join(CONFIG_ECHO)), vec![]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn string_values_need_no_quotes() {
        let c = RunConfig::resolve(None, vec![parse_assignment("train.dialect=EGY").unwrap()]).unwrap();
        assert_eq!(c.train.dialect.as_deref(), Some("EGY"));
    }
}
