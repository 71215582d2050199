//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every command
//! declares the keys it accepts; unknown, duplicate and missing required keys
//! are errors naming the key.

use std::path::PathBuf;

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug)]
pub enum Default {
    Required,
    Optional,
    Value(&'static str),
}

#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: Default,
}

pub const fn required(name: &'static str) -> Key {
    Key {
        name,
        default: Default::Required,
    }
}

pub const fn optional(name: &'static str) -> Key {
    Key {
        name,
        default: Default::Optional,
    }
}

pub const fn value(name: &'static str, default: &'static str) -> Key {
    Key {
        name,
        default: Default::Value(default),
    }
}

/// Raw `(key, value)` pairs in file order.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(config_err(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(config_err(format!("duplicate key `{k}`")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Effective settings of one command, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: Vec<(&'static str, Option<String>)>,
}

impl Config {
    /// Checks `raw` against `keys` and fills in defaults. `seed` overrides the
    /// `seed` key when given.
    pub fn resolve(raw: &[(String, String)], keys: &[Key], seed: Option<u64>) -> Result<Self> {
        if let Some((k, _)) = raw.iter().find(|(k, _)| !keys.iter().any(|key| key.name == k)) {
            return Err(config_err(format!("unknown key `{k}`")));
        }
        let mut values = Vec::with_capacity(keys.len());
        for key in keys {
            let given = raw.iter().find(|(k, _)| k == key.name).map(|(_, v)| v.clone());
            let v = match (given, key.default) {
                (Some(v), _) => Some(v),
                (None, Default::Value(d)) => Some(d.to_string()),
                (None, Default::Optional) => None,
                (None, Default::Required) => {
                    return Err(config_err(format!("missing required key `{}`", key.name)))
                }
            };
            values.push((key.name, v));
        }
        let mut cfg = Self { values };
        if let Some(s) = seed {
            match cfg.values.iter_mut().find(|(k, _)| *k == "seed") {
                Some(slot) => slot.1 = Some(s.to_string()),
                None => return Err(config_err("this command takes no seed")),
            }
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str, keys: &[Key], seed: Option<u64>) -> Result<Self> {
        Self::resolve(&parse(text)?, keys, seed)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .unwrap_or_else(|| panic!("key `{key}` was not declared"))
            .1
            .as_deref()
    }

    pub fn has(&self, key: &str) -> bool {
        self.raw(key).is_some()
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.raw(key).ok_or_else(|| config_err(format!("missing required key `{key}`")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let v = self.str(key)?;
        if v.is_empty() {
            return Err(config_err(format!("key `{key}` needs a path")));
        }
        Ok(PathBuf::from(v))
    }

    /// Accepts decimals and fractions such as `8/255`.
    pub fn f64(&self, key: &str) -> Result<f64> {
        parse_number(self.str(key)?).map_err(|e| config_err(format!("key `{key}`: {e}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| config_err(format!("key `{key}`: expected a non-negative integer, got `{v}`")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| config_err(format!("key `{key}`: expected a non-negative integer, got `{v}`")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(config_err(format!("key `{key}`: expected true or false, got `{v}`"))),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        split_list(self.str(key)?)
            .map(|t| parse_number(t).map_err(|e| config_err(format!("key `{key}`: {e}"))))
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        split_list(self.str(key)?)
            .map(|t| {
                t.parse()
                    .map_err(|_| config_err(format!("key `{key}`: expected integers, got `{t}`")))
            })
            .collect()
    }

    /// `key=value` lines of every set key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            if let Some(v) = v {
                s.push_str(k);
                s.push('=');
                s.push_str(v);
                s.push('\n');
            }
        }
        s
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|t| !t.is_empty())
}

fn parse_number(v: &str) -> std::result::Result<f64, String> {
    let bad = || format!("expected a number, got `{v}`");
    let x = match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => v.parse().map_err(|_| bad())?,
    };
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[Key] = &[required("regime"), value("epsilon", "8/255"), optional("sigma"), value("seed", "0")];

    #[test]
    fn defaults_and_overrides() {
        let c = Config::from_text("# comment\nregime = nominal\n\n", KEYS, Some(7)).unwrap();
        assert_eq!(c.str("regime").unwrap(), "nominal");
        assert!((c.f64("epsilon").unwrap() - 8.0 / 255.0).abs() < 1e-15);
        assert!(!c.has("sigma"));
        assert_eq!(c.u64("seed").unwrap(), 7);
        let again = Config::from_text(&c.to_text(), KEYS, None).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn errors_name_the_key() {
        let e = Config::from_text("epsilon=1", KEYS, None).unwrap_err();
        assert!(e.to_string().contains("`regime`"));
        let e = Config::from_text("regime=a\nepsilno=1", KEYS, None).unwrap_err();
        assert!(e.to_string().contains("`epsilno`"));
        let e = Config::from_text("regime=a\nregime=b", KEYS, None).unwrap_err();
        assert!(e.to_string().contains("duplicate"));
        let c = Config::from_text("regime=a\nepsilon=x/2", KEYS, None).unwrap();
        assert!(c.f64("epsilon").is_err());
        assert!(Config::from_text("novalue", KEYS, None).is_err());
    }
}
