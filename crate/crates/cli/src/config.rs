//! `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key = value", i + 1);
            };
            let v = v.trim().trim_matches('"').to_string();
            if values.insert(normalize(k), v).is_some() {
                bail!("line {}: duplicate key {}", i + 1, k.trim());
            }
        }
        Ok(Self { values })
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key {key}: {e}")),
        }
    }

    /// Fails if any key was never taken.
    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.values.keys().next() {
            bail!("unknown config key {k:?}");
        }
        Ok(())
    }
}

/// Flag value, else config value, else `None`.
pub fn pick<T: FromStr>(flag: Option<T>, cfg: &mut Config, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    let from_cfg = cfg.take(key)?;
    Ok(flag.or(from_cfg))
}

/// Boolean switch: set by the flag or by `key = true` in the config.
pub fn switch(flag: bool, cfg: &mut Config, key: &str) -> Result<bool> {
    Ok(flag || cfg.take::<bool>(key)?.unwrap_or(false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_take() {
        let mut c = Config::parse("# comment\nn-t = 25\nseed=3 # trailing\n\nmethod = \"flow\"\n").unwrap();
        assert_eq!(c.take::<usize>("n_t").unwrap(), Some(25));
        assert_eq!(pick(Some(9u64), &mut c, "seed").unwrap(), Some(9));
        assert_eq!(c.take::<String>("method").unwrap().as_deref(), Some("flow"));
        c.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let c = Config::parse("bogus = 1").unwrap();
        assert!(c.finish().is_err());
        assert!(Config::parse("just words").is_err());
        assert!(Config::parse("a = 1\na = 2").is_err());
        let mut c = Config::parse("k = many").unwrap();
        assert!(c.take::<usize>("k").is_err());
    }
}
