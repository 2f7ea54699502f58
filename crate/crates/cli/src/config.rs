//! Key-value config files with flag override precedence.
//!
//! Lines look like `learning-rate = 0.001` (`=` optional); `#` starts a
//! comment. Keys use the long flag names. A value given on the command
//! line always wins over the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = match line.split_once('=') {
                    Some((k, v)) => (k.trim(), v.trim()),
                    None => match line.split_once(char::is_whitespace) {
                        Some((k, v)) => (k.trim(), v.trim()),
                        None => bail!(
                            "{}:{}: expected 'key = value', got '{raw}'",
                            path.display(),
                            lineno + 1
                        ),
                    },
                };
                if key.is_empty() || value.is_empty() {
                    bail!("{}:{}: expected 'key = value', got '{raw}'", path.display(), lineno + 1);
                }
                values.insert(key.to_string(), value.to_string());
            }
        }
        Ok(Self { values })
    }

    /// Flag value if given, else the config-file value, else the default.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| anyhow::anyhow!("config key '{key}': bad value '{raw}': {e}")),
            None => Ok(default),
        }
    }

    /// Like [`resolve`] but without a default; `None` when absent.
    pub fn resolve_opt<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key '{key}': bad value '{raw}': {e}")),
            None => Ok(None),
        }
    }
}
