//! Layered configuration: defaults, then an optional JSON file, then
//! dotted `key=value` overrides.

use std::fs;
use std::path::Path;

use harmonize_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub fn load_config<T>(path: Option<&Path>, sets: &[String]) -> anyhow::Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let base: T = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => T::default(),
    };
    let merged = apply(serde_json::to_value(base)?, sets)?;
    Ok(serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?)
}

/// Sets each dotted key to its value, parsed as JSON when possible and as a
/// plain string otherwise. Keys must already exist.
pub fn apply(mut root: Value, sets: &[String]) -> Result<Value, Error> {
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
        }
        *slot = value;
    }
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_keys_are_replaced() {
        let v = apply(
            json!({"a": {"b": 1}, "c": null}),
            &["a.b=2.5".into(), "c=dir".into()],
        )
        .unwrap();
        assert_eq!(v, json!({"a": {"b": 2.5}, "c": "dir"}));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(apply(json!({"a": 1}), &["b=1".into()]).is_err());
        assert!(apply(json!({"a": 1}), &["a.b=1".into()]).is_err());
        assert!(apply(json!({"a": 1}), &["a".into()]).is_err());
    }
}
