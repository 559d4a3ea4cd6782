//! Experiment configuration: a preset, then an optional JSON file deep-merged
//! on top, then `key=value` overrides.

use std::fs;
use std::path::Path;

use cdhm::eval::ExperimentConfig;
use clap::ValueEnum;
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full network widths at 224×224.
    Full,
    /// Reduced widths at 32×32 for single-core runs.
    Desk,
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Full => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    // A tagged enum switching variant replaces the object.
                    Some(slot) if slot.get("kind").is_some() && v.get("kind").is_some_and(|k| Some(k) != slot.get("kind")) => *slot = v,
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Every dotted path in `v` whose last segment equals `key`.
fn find_key(v: &Value, key: &str, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(m) = v {
        for (k, child) in m {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if k == key {
                out.push(path.clone());
            }
            find_key(child, key, &path, out);
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `key=value`. `key` is either a dotted path from the root
/// (`train.learning_rate`) or a field name that occurs exactly once in the
/// tree (`learning_rate`). The value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    let path = if key.contains('.') {
        key.to_string()
    } else {
        let mut hits = Vec::new();
        find_key(root, key, "", &mut hits);
        match hits.len() {
            1 => hits.remove(0),
            0 => return Err(CliError::ConfigKey { key: key.into(), detail: "unknown configuration key".into() }),
            _ => {
                return Err(CliError::ConfigKey {
                    key: key.into(),
                    detail: format!("ambiguous; use one of {}", hits.join(", ")),
                })
            }
        }
    };
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let obj = node.as_object_mut().ok_or_else(|| CliError::ConfigKey {
            key: path.clone(),
            detail: format!("{} is not an object", segments[..i].join(".")),
        })?;
        if !obj.contains_key(*seg) {
            return Err(CliError::ConfigKey { key: path.clone(), detail: "unknown configuration key".into() });
        }
        if last {
            obj.insert(seg.to_string(), parse_value(raw));
            return Ok(());
        }
        node = obj.get_mut(*seg).expect("checked above");
    }
    unreachable!("split yields at least one segment")
}

fn decode(v: Value) -> Result<ExperimentConfig, CliError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let key = e.path().to_string();
        let detail = e.into_inner().to_string();
        let key = match (key.as_str(), unknown_field(&detail)) {
            (".", Some(f)) => f,
            (p, Some(f)) if p != f && !p.ends_with(&format!(".{f}")) => format!("{p}.{f}"),
            (p, _) => p.to_string(),
        };
        CliError::ConfigKey { key, detail }
    })
}

fn unknown_field(detail: &str) -> Option<String> {
    let rest = detail.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

pub fn load(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut root = serde_json::to_value(preset.config()).expect("config serializes");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| CliError::ConfigKey {
            key: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if !patch.is_object() {
            return Err(CliError::ConfigKey {
                key: path.display().to_string(),
                detail: "top level must be a JSON object".into(),
            });
        }
        // Unknown keys survive the merge and are rejected by `decode`.
        merge(&mut root, patch);
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg = decode(root)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_pretty(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn root() -> Value {
        serde_json::to_value(ExperimentConfig::default()).unwrap()
    }

    #[test]
    fn bare_and_dotted_overrides() {
        let mut v = root();
        apply_override(&mut v, "learning_rate=1e-5").unwrap();
        apply_override(&mut v, "train.epochs=3").unwrap();
        let cfg = decode(v).unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-5);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn unknown_and_ambiguous_keys_are_named() {
        let mut v = root();
        match apply_override(&mut v, "no_such_key=1") {
            Err(CliError::ConfigKey { key, .. }) => assert_eq!(key, "no_such_key"),
            other => panic!("{other:?}"),
        }
        match apply_override(&mut v, "resolution=64") {
            Err(CliError::ConfigKey { detail, .. }) => assert!(detail.contains("pipeline.resolution")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(apply_override(&mut v, "epochs"), Err(CliError::Usage(_))));
    }

    #[test]
    fn schema_violations_name_the_key() {
        let mut v = root();
        v["train"]["bogus"] = Value::from(1);
        match decode(v) {
            Err(CliError::ConfigKey { key, .. }) => assert_eq!(key, "train.bogus"),
            other => panic!("{other:?}"),
        }
        let mut v = root();
        v["train"]["epochs"] = Value::from("many");
        match decode(v) {
            Err(CliError::ConfigKey { key, .. }) => assert_eq!(key, "train.epochs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_merges_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"epochs": 2}, "seeds": [7]}"#).unwrap();
        let cfg = load(Preset::Desk, Some(&path), &["batch_size=4".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.model.resolution, 32);
    }

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                load(Preset::Desk, Some(&path), &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                seen += 1;
            }
        }
        assert!(seen >= 3);
    }
}
