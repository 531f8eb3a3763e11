//! JSON model configs.
//!
//! A config file is a serialized [`ModelConfig`]; unknown keys anywhere are
//! rejected. The JSON Schema lives in `docs/config.schema.json`.
//!
//! Overrides take the form `path=value`, where `path` is a dotted key path
//! (array elements by index, e.g. `stages.2.depth`) and `value` is JSON. A
//! value that does not parse as JSON is taken as a string, so `kind=merge`
//! works unquoted.

use std::fs;
use std::path::Path;

use dualvit_core::ModelConfig;
use serde_json::Value;

use crate::error::{Error, Result};

/// Parses and validates a config document.
pub fn parse(text: &str) -> Result<ModelConfig> {
    let config: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn to_json(config: &ModelConfig) -> String {
    serde_json::to_string_pretty(config).expect("configs always serialize")
}

/// Applies `path=value` overrides in order and validates the result.
pub fn apply_overrides<S: AsRef<str>>(config: &ModelConfig, overrides: &[S]) -> Result<ModelConfig> {
    if overrides.is_empty() {
        return Ok(config.clone());
    }
    let mut doc = serde_json::to_value(config).expect("configs always serialize");
    for item in overrides {
        let item = item.as_ref();
        let Some((path, raw)) = item.split_once('=') else {
            return Err(Error::Config(format!("override `{item}` is not of the form key=value")));
        };
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *lookup(&mut doc, path.trim())? = value;
        // type-check each step so the error names the offending override
        serde_json::from_value::<ModelConfig>(doc.clone())
            .map_err(|e| Error::Config(format!("override `{item}`: {e}")))?;
    }
    let config: ModelConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn lookup<'a>(doc: &'a mut Value, path: &str) -> Result<&'a mut Value> {
    let mut node = doc;
    for (depth, key) in path.split('.').enumerate() {
        let so_far = || path.split('.').take(depth + 1).collect::<Vec<_>>().join(".");
        node = match node {
            Value::Object(map) => {
                let known: Vec<String> = map.keys().cloned().collect();
                map.get_mut(key).ok_or_else(|| {
                    Error::Config(format!("unknown key `{}` (expected one of: {})", so_far(), known.join(", ")))
                })?
            }
            Value::Array(items) => {
                let len = items.len();
                key.parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| Error::Config(format!("`{}`: expected an index below {len}", so_far())))?
            }
            _ => {
                return Err(Error::Config(format!(
                    "`{}` has no field `{key}`",
                    so_far().rsplit_once('.').map_or("", |p| p.0)
                )))
            }
        };
    }
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualvit_core::{BlockKind, Preset};

    fn tiny() -> ModelConfig {
        Preset::Tiny.config()
    }

    fn config_error(r: Result<ModelConfig>) -> String {
        match r {
            Err(Error::Config(msg)) => msg,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn presets_round_trip_through_json() {
        for preset in Preset::ALL {
            let c = preset.config();
            assert_eq!(parse(&to_json(&c)).unwrap(), c);
        }
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let mut doc = serde_json::to_value(tiny()).unwrap();
        doc["dropout"] = 0.1.into();
        assert!(config_error(parse(&doc.to_string())).contains("unknown field `dropout`"));

        let mut doc = serde_json::to_value(tiny()).unwrap();
        doc["stages"][1]["window"] = 7.into();
        assert!(config_error(parse(&doc.to_string())).contains("unknown field `window`"));
    }

    #[test]
    fn missing_keys_are_rejected() {
        let mut doc = serde_json::to_value(tiny()).unwrap();
        doc.as_object_mut().unwrap().remove("pos_embed");
        assert!(config_error(parse(&doc.to_string())).contains("missing field `pos_embed`"));
    }

    #[test]
    fn parsed_configs_are_validated() {
        let mut doc = serde_json::to_value(tiny()).unwrap();
        doc["stages"][0]["heads"] = 3.into();
        assert!(matches!(parse(&doc.to_string()), Err(Error::Model(_))));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c =
            apply_overrides(&tiny(), &["semantic_tokens=8", "stages.2.depth=2", "pos_embed=false", "seed=5"]).unwrap();
        assert_eq!((c.semantic_tokens, c.stages[2].depth, c.pos_embed, c.seed), (8, 2, false, 5));
        let c = apply_overrides(&Preset::Small.config(), &["resolution=64"]).unwrap();
        assert_eq!(c.resolution, 64);
    }

    #[test]
    fn unquoted_strings_are_accepted() {
        let err = apply_overrides(&tiny(), &["stages.0.kind=merge"]).unwrap_err();
        // parses fine, then fails validation: stage 1 must be dual
        assert!(err.to_string().contains("stage 1 must use dual blocks"), "{err}");
        let c = apply_overrides(&tiny(), &["stages.0.kind=merge", "stages.0.kind=\"dual\""]).unwrap();
        assert_eq!(c.stages[0].kind, BlockKind::Dual);
    }

    #[test]
    fn bad_overrides_name_the_problem() {
        assert!(
            config_error(apply_overrides(&tiny(), &["depth=2"])).starts_with("unknown key `depth` (expected one of:")
        );
        assert!(config_error(apply_overrides(&tiny(), &["stages.4.depth=2"])).contains("expected an index below 4"));
        assert!(config_error(apply_overrides(&tiny(), &["stages.0.depth.x=2"])).contains("no field `x`"));
        assert!(config_error(apply_overrides(&tiny(), &["resolution=big"])).starts_with("override `resolution=big`"));
        assert!(config_error(apply_overrides(&tiny(), &["resolution"])).contains("key=value"));
    }

    #[test]
    fn overrides_are_validated() {
        assert!(matches!(apply_overrides(&tiny(), &["stages.0.heads=3"]), Err(Error::Model(_))));
        assert!(matches!(apply_overrides(&tiny(), &["resolution=48"]), Err(Error::Model(_))));
    }
}
