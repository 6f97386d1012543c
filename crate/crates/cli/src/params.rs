//! Parameter resolution: command defaults, then the config file, then flags.
//!
//! A config file is flat `key=value` text. Recognised keys are the
//! experiment keys (see `ExperimentConfig::KEYS`), the keys of the running
//! command, and `command`, which must name the running command when present.
//! Run snapshots use the same format, so `--config out/run.config` repeats a
//! run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use underq_core::agent::ExperimentConfig;

use crate::Failure;

/// One line of a config file.
#[derive(Debug, Clone)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn read_config(path: &Path) -> Result<Vec<Entry>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config file `{}`: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        out.push(Entry { line: i + 1, key: k.trim().to_string(), value: v.trim().to_string() });
    }
    Ok(out)
}

/// Resolved command parameters, kept as text in declaration order.
#[derive(Debug, Clone)]
pub struct Params {
    command: &'static str,
    keys: Vec<&'static str>,
    values: BTreeMap<&'static str, String>,
}

impl Params {
    pub fn new(command: &'static str, defaults: &[(&'static str, &str)]) -> Self {
        Self {
            command,
            keys: defaults.iter().map(|(k, _)| *k).collect(),
            values: defaults.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        }
    }

    fn slot(&self, key: &str) -> Option<&'static str> {
        self.keys.iter().copied().find(|k| *k == key)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let k = self.slot(key).expect("flags map onto declared keys");
        self.values.insert(k, value.into());
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Failure> {
        let v = self.raw(key);
        v.parse().map_err(|_| Failure::usage(format!("invalid value `{v}` for `{key}`")))
    }

    /// `None` when the value is empty.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Applies config entries; experiment keys go to `exp` when given.
    pub fn apply_entries(&mut self, entries: &[Entry], mut exp: Option<&mut ExperimentConfig>) -> Result<(), Failure> {
        for e in entries {
            if e.key == "command" {
                if e.value != self.command {
                    return Err(Failure::usage(format!(
                        "config line {}: file is for `{}`, not `{}`",
                        e.line, e.value, self.command
                    )));
                }
            } else if let Some(k) = self.slot(&e.key) {
                self.values.insert(k, e.value.clone());
            } else if ExperimentConfig::KEYS.contains(&e.key.as_str()) {
                if let Some(exp) = exp.as_deref_mut() {
                    exp.set(&e.key, &e.value)
                        .map_err(|err| Failure::usage(format!("config line {}: {err}", e.line)))?;
                }
            } else {
                return Err(Failure::usage(format!("config line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        Ok(())
    }

    /// `command=...` followed by every parameter.
    pub fn snapshot(&self) -> String {
        let mut out = format!("command={}\n", self.command);
        for k in &self.keys {
            let _ = writeln!(out, "{k}={}", self.values[k]);
        }
        out
    }
}
