//! Experiment configuration: a TOML file layered over preset defaults, then
//! `key=value` overrides. Unknown keys are rejected with their path.
//!
//! An override key is either a dotted path (`train.lambda`) or a bare leaf
//! name that occurs exactly once in the tree (`lambda`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{ModelConfig, ScalePreset};
use crate::train::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn for_preset(preset: ScalePreset) -> Self {
        let model = preset.model_config();
        Self {
            output_dir: PathBuf::from("runs/default"),
            train: TrainConfig {
                scale_preset: preset,
                ..TrainConfig::default()
            },
            pretrain: PretrainConfig {
                decoder: model.decoder.clone(),
                ..PretrainConfig::default()
            },
            model,
            eval: EvalConfig::default(),
            data: DataConfig {
                train_manifest: None,
                eval_manifest: None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::config("eval.threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Layers `file` (if any) and `overrides` over the preset named in them.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
            }
            None => Table::new(),
        };
        let parsed: Vec<(String, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;

        // the preset decides the defaults, so find it first
        let mut probe = Value::Table(user.clone());
        let base = Value::try_from(Self::for_preset(ScalePreset::Desk)).map_err(internal)?;
        for (k, v) in &parsed {
            set_path(&mut probe, &resolve_key(&base, k)?, v.clone())?;
        }
        let preset = match probe.get("train").and_then(|t| t.get("scale_preset")) {
            Some(Value::String(s)) => s.parse::<ScalePreset>()?,
            Some(other) => {
                return Err(Error::config(
                    "train.scale_preset",
                    format!("expected a string, got {other}"),
                ))
            }
            None => ScalePreset::Desk,
        };

        let mut merged = Value::try_from(Self::for_preset(preset)).map_err(internal)?;
        merge(&mut merged, Value::Table(user), "")?;
        for (k, v) in parsed {
            let path = resolve_key(&merged, &k)?;
            set_path(&mut merged, &path, v)?;
        }
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(field_of(&e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(internal)
    }

    /// Writes the fully resolved configuration to `dir/resolved_config.toml`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::file(&path, e))?;
        Ok(path)
    }
}

fn internal(e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("config serialization: {e}"))
}

fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    // serde reports unknown keys as "unknown field `x`, expected ..."
    msg.split('`').nth(1).map_or_else(|| "config".into(), str::to_string)
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(raw, "override must look like key=value"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::config(raw, "empty override key"));
    }
    // TOML literal if it parses as one, otherwise a bare string
    let value = format!("v = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Table(t) = v {
        for (k, child) in t {
            let p = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            out.push(p.clone());
            leaf_paths(child, &p, out);
        }
    }
}

/// `Option` fields are absent from serialized defaults while unset.
const OPTIONAL_PATHS: [&str; 4] = [
    "train.max_steps",
    "data.train_manifest",
    "data.eval_manifest",
    "model.perceptual.weights",
];

fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>> {
    let mut paths = Vec::new();
    leaf_paths(tree, "", &mut paths);
    paths.extend(OPTIONAL_PATHS.iter().map(|s| s.to_string()));
    paths.sort();
    paths.dedup();
    let hits: Vec<&String> = if key.contains('.') {
        paths.iter().filter(|p| *p == key).collect()
    } else {
        paths.iter().filter(|p| p.rsplit('.').next() == Some(key)).collect()
    };
    match hits.as_slice() {
        [one] => Ok(one.split('.').map(str::to_string).collect()),
        [] => Err(Error::config(key, "unknown config key")),
        many => Err(Error::config(
            key,
            format!(
                "ambiguous key, use one of: {}",
                many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ),
        )),
    }
}

fn set_path(tree: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = tree;
    for (i, k) in path.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(path[..i].join("."), "not a table"))?;
        if i + 1 == path.len() {
            table.insert(k.clone(), value);
            return Ok(());
        }
        cur = table.entry(k.clone()).or_insert_with(|| Value::Table(Table::new()));
    }
    Ok(())
}

/// Deep merge of `over` into `base`; tables merge, everything else
/// replaces. Keys outside the schema are rejected.
fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() => merge(slot, v, &p)?,
                    Some(slot) => *slot = v,
                    None if OPTIONAL_PATHS.contains(&p.as_str()) => {
                        b.insert(k, v);
                    }
                    None => return Err(Error::config(p, "unknown config key")),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        for p in ScalePreset::ALL {
            let cfg = ExperimentConfig::for_preset(p);
            let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn overrides_by_leaf_and_path() {
        let cfg = ExperimentConfig::resolve(None, &ov(&["lambda=0.1", "train.seed=7", "max_steps=12"])).unwrap();
        assert_eq!(cfg.train.lambda, 0.1);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.max_steps, Some(12));
        let cfg = ExperimentConfig::resolve(None, &ov(&["scale_preset=tiny"])).unwrap();
        assert_eq!(cfg.model, ModelConfig::tiny());
    }

    #[test]
    fn bad_keys_report_their_path() {
        let e = ExperimentConfig::resolve(None, &ov(&["lamda=0.1"])).unwrap_err();
        assert!(matches!(e, Error::Config { ref path, .. } if path == "lamda"), "{e}");
        let e = ExperimentConfig::resolve(None, &ov(&["seed=1"])).unwrap_err();
        assert!(e.to_string().contains("ambiguous"), "{e}");
        let e = ExperimentConfig::resolve(None, &ov(&["lambda=-1"])).unwrap_err();
        assert!(matches!(e, Error::Config { ref path, .. } if path == "train.lambda"));
    }

    #[test]
    fn file_layer_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlambda = 0.5\nscale_preset = \"compact\"\n").unwrap();
        let cfg = ExperimentConfig::resolve(Some(&p), &[]).unwrap();
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.model, ModelConfig::compact());
        std::fs::write(&p, "[train]\nlambdaa = 0.5\n").unwrap();
        let e = ExperimentConfig::resolve(Some(&p), &[]).unwrap_err();
        assert!(
            matches!(e, Error::Config { ref path, .. } if path == "train.lambdaa"),
            "{e}"
        );
    }

    #[test]
    fn snapshot_reproduces_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::resolve(None, &ov(&["lambda=0.1"])).unwrap();
        let p = cfg.write_snapshot(dir.path()).unwrap();
        assert_eq!(ExperimentConfig::resolve(Some(&p), &[]).unwrap(), cfg);
    }
}
