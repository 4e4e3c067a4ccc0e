//! `key = value` run configuration with flag > file > default precedence.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key = value, got {raw:?}", n + 1))?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_owned());
    }
    Ok(out)
}

/// Resolves settings and records every resolved value for the config echo.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(path) => {
                let text =
                    fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
                parse_config(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => BTreeMap::new(),
        };
        Ok(Resolver {
            file,
            resolved: Vec::new(),
        })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key {key}: {e}")))
            .transpose()
    }

    fn record(&mut self, key: &str, value: String) {
        self.resolved.retain(|(k, _)| k != key);
        self.resolved.push((key.to_owned(), value));
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.record(key, value.to_string());
        Ok(value)
    }

    /// Like [`Resolver::get`] without a default.
    pub fn opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &value {
            self.record(key, v.to_string());
        }
        Ok(value)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key, flag)?.ok_or_else(|| {
            anyhow!(
                "{key} must be given as --{} or in the config file",
                key.replace('_', "-")
            )
        })
    }

    /// Records a derived value that has no flag of its own.
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.record(key, value.to_string());
    }

    pub fn echo(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Keys in the file that no setting consumed.
    pub fn unused(&self) -> Vec<&str> {
        self.file
            .keys()
            .filter(|k| !self.resolved.iter().any(|(r, _)| r == *k))
            .map(String::as_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_file_default() {
        let mut r = Resolver {
            file: parse_config("seed = 3\npeak-lr = 0.5 # comment\n\n").unwrap(),
            resolved: Vec::new(),
        };
        assert_eq!(r.get("seed", Some(9u64), 0).unwrap(), 9);
        assert_eq!(r.get("peak_lr", None, 1.0f64).unwrap(), 0.5);
        assert_eq!(r.get("epochs", None, 4usize).unwrap(), 4);
        assert_eq!(r.echo(), "seed = 9\npeak_lr = 0.5\nepochs = 4\n");
    }

    #[test]
    fn malformed_lines_and_values() {
        assert!(parse_config("seed 3").is_err());
        let mut r = Resolver {
            file: parse_config("seed = x").unwrap(),
            resolved: Vec::new(),
        };
        assert!(r.get("seed", None, 0u64).is_err());
        assert!(r.require::<u64>("epochs", None).is_err());
    }
}
