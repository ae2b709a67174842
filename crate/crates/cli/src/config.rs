//! JSON config files. A config is one JSON object whose keys are the long
//! flag names in snake_case. Keys may sit at the top level or under an
//! object named after the subcommand; the subcommand section wins over the
//! top level, and flags given on the command line win over both.

use std::path::Path;

use chmm::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub fn load(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading config {}: {e}", path.display())))?;
    match serde_json::from_str(&text)? {
        Value::Object(map) => Ok(map),
        _ => Err(Error::Parse("config must be a JSON object".into())),
    }
}

/// Overlays `args` (flags actually given) on the config values for
/// `command`.
pub fn merge<T: Serialize + DeserializeOwned>(
    args: &T,
    config: Option<&Map<String, Value>>,
    command: &str,
) -> Result<T> {
    let Some(config) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(args)?)?);
    };
    let Value::Object(flags) = serde_json::to_value(args)? else {
        unreachable!("argument structs serialize to objects")
    };
    let mut merged = Map::new();
    for (key, value) in config {
        if flags.contains_key(key) {
            merged.insert(key.clone(), value.clone());
        }
    }
    if let Some(Value::Object(section)) = config.get(command) {
        for (key, value) in section {
            if flags.contains_key(key) {
                merged.insert(key.clone(), value.clone());
            }
        }
    }
    for (key, value) in flags {
        let given = match &value {
            Value::Null => false,
            Value::Bool(b) => *b,
            _ => true,
        };
        if given || !merged.contains_key(&key) {
            merged.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::Parse(format!("config for {command}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Args {
        seed: Option<u64>,
        n_theta: Option<usize>,
        quiet: bool,
    }

    #[test]
    fn flags_override_sections_override_top_level() {
        let config: Map<String, Value> = serde_json::from_str(
            r#"{"seed": 1, "n_theta": 10, "quiet": true, "rank": {"n_theta": 20}, "other": 5}"#,
        )
        .unwrap();
        let args = Args { seed: Some(9), n_theta: None, quiet: false };
        let merged = merge(&args, Some(&config), "rank").unwrap();
        assert_eq!(merged, Args { seed: Some(9), n_theta: Some(20), quiet: true });
        let merged = merge(&args, Some(&config), "evidence").unwrap();
        assert_eq!(merged.n_theta, Some(10));
        assert_eq!(merge(&args, None, "rank").unwrap(), args);
    }
}
