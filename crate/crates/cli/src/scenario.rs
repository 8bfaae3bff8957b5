//! Scenario files: TOML text mapped onto [`Scenario`], with unknown keys
//! reported as warnings.

use std::fmt;
use std::path::Path;

use drmpc_core::sim::Scenario;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioError {
    Io(String),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Io(m) => write!(f, "cannot read scenario: {m}"),
            ScenarioError::Parse(m) => write!(f, "cannot parse scenario: {m}"),
            ScenarioError::Invalid(m) => write!(f, "invalid scenario: {m}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

/// A validated scenario plus the keys that were present but not understood.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub scenario: Scenario,
    pub unknown_keys: Vec<String>,
}

pub fn parse_scenario(text: &str) -> Result<Loaded, ScenarioError> {
    let raw: toml::Table = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    scenario.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let canon = toml::Value::try_from(&scenario).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let mut unknown_keys = Vec::new();
    collect_unknown(&toml::Value::Table(raw), &canon, "", &mut unknown_keys);
    Ok(Loaded {
        scenario,
        unknown_keys,
    })
}

pub fn load_scenario(path: &Path) -> Result<Loaded, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}

/// Canonical text form: every field written out, defaults included.
pub fn write_scenario(scenario: &Scenario) -> Result<String, ScenarioError> {
    toml::to_string(scenario).map_err(|e| ScenarioError::Parse(e.to_string()))
}

/// SHA-256 of the canonical text, hex encoded.
pub fn scenario_hash(scenario: &Scenario) -> Result<String, ScenarioError> {
    let text = write_scenario(scenario)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn collect_unknown(input: &toml::Value, canon: &toml::Value, path: &str, out: &mut Vec<String>) {
    match (input, canon) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (k, v) in a {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get(k) {
                    Some(bv) => collect_unknown(v, bv, &p, out),
                    None => out.push(p),
                }
            }
        }
        (toml::Value::Array(a), toml::Value::Array(b)) => {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                collect_unknown(x, y, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}
