//! Flat key-value configuration with sections.
//!
//! ```text
//! [run]
//! seed = 7
//! precision = 32
//! ```
//!
//! No nesting, no repeated keys. The emitted form parses back to an equal
//! configuration, so a run's resolved-config echo is itself a valid config
//! file.

use std::fmt::Display;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Config {
    pub fn new() -> Self {
        Config::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        let mut current: Option<String> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Config {
                    detail: format!("line {}: unterminated section header", ln + 1),
                })?;
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::Config {
                        detail: format!("line {}: empty section name", ln + 1),
                    });
                }
                if cfg.sections.iter().any(|(s, _)| s == name) {
                    return Err(Error::Config {
                        detail: format!("line {}: duplicate section [{name}]", ln + 1),
                    });
                }
                cfg.sections.push((name.to_string(), Vec::new()));
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                detail: format!("line {}: expected key = value", ln + 1),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || key.contains('.') {
                return Err(Error::Config {
                    detail: format!("line {}: bad key {key:?}", ln + 1),
                });
            }
            let section = current.clone().ok_or_else(|| Error::Config {
                detail: format!("line {}: key {key} before any [section]", ln + 1),
            })?;
            let entries = &mut cfg
                .sections
                .iter_mut()
                .find(|(s, _)| *s == section)
                .expect("section exists")
                .1;
            if entries.iter().any(|(k, _)| k == key) {
                return Err(Error::Config {
                    detail: format!("line {}: duplicate key {section}.{key}", ln + 1),
                });
            }
            entries.push((key.to_string(), value.to_string()));
        }
        Ok(cfg)
    }

    /// Canonical emission; `parse(emit(c)) == c`.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (section, entries) in &self.sections {
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(s, _)| s == section)?
            .1
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Display) {
        let value = value.to_string();
        let entries = match self.sections.iter_mut().find(|(s, _)| s == section) {
            Some((_, e)) => e,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                &mut self.sections.last_mut().expect("just pushed").1
            }
        };
        match entries.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value,
            None => entries.push((key.to_string(), value)),
        }
    }

    /// All (section, key) pairs in order.
    pub fn keys(&self) -> Vec<(String, String)> {
        self.sections
            .iter()
            .flat_map(|(s, entries)| entries.iter().map(move |(k, _)| (s.clone(), k.clone())))
            .collect()
    }

    /// Overlay every entry of `other` onto `self`.
    pub fn merge(&mut self, other: &Config) {
        for (section, entries) in &other.sections {
            for (k, v) in entries {
                self.set(section, k, v);
            }
        }
    }

    /// Reject any key that `template` does not define.
    pub fn validate_against(&self, template: &Config) -> Result<()> {
        for (section, entries) in &self.sections {
            for (k, _) in entries {
                if template.get(section, k).is_none() {
                    return Err(Error::Config {
                        detail: format!("unknown key {section}.{k}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| Error::Config {
            detail: format!("missing required key {section}.{key}"),
        })
    }

    pub fn parse_value<V: std::str::FromStr>(&self, section: &str, key: &str) -> Result<V> {
        let raw = self.require(section, key)?;
        raw.parse().map_err(|_| Error::Config {
            detail: format!(
                "key {section}.{key} has value {raw:?}, expected {}",
                std::any::type_name::<V>()
            ),
        })
    }

    pub fn parse_or<V: std::str::FromStr>(&self, section: &str, key: &str, default: V) -> Result<V> {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| Error::Config {
                detail: format!(
                    "key {section}.{key} has value {raw:?}, expected {}",
                    std::any::type_name::<V>()
                ),
            }),
        }
    }

    pub fn get_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => Err(Error::Config {
                detail: format!("key {section}.{key} has value {other:?}, expected a boolean"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emitted_form_round_trips() {
        let mut cfg = Config::new();
        cfg.set("run", "seed", 7);
        cfg.set("run", "precision", 32);
        cfg.set("data", "dataset", "mnist");
        let text = cfg.emit();
        let back = Config::parse(&text).unwrap();
        assert_eq!(cfg, back);
        // and emission is stable
        assert_eq!(text, back.emit());
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let cfg = Config::parse("# comment\n[a]\n  x = 1  \n\n# more\ny = hello world\n").unwrap();
        assert_eq!(cfg.get("a", "x"), Some("1"));
        assert_eq!(cfg.get("a", "y"), Some("hello world"));
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(Config::parse("x = 1\n").is_err()); // key before section
        assert!(Config::parse("[a]\nx\n").is_err()); // no equals
        assert!(Config::parse("[a]\nx = 1\nx = 2\n").is_err()); // duplicate
        assert!(Config::parse("[a\nx = 1\n").is_err()); // unterminated header
    }

    #[test]
    fn unknown_keys_fail_validation() {
        let mut template = Config::new();
        template.set("run", "seed", 0);
        let mut cfg = Config::new();
        cfg.set("run", "seed", 3);
        assert!(cfg.validate_against(&template).is_ok());
        cfg.set("run", "sneed", 3);
        let err = cfg.validate_against(&template).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn merge_overlays_values() {
        let mut base = Config::new();
        base.set("run", "seed", 0);
        base.set("run", "precision", 32);
        let mut over = Config::new();
        over.set("run", "seed", 9);
        base.merge(&over);
        assert_eq!(base.get("run", "seed"), Some("9"));
        assert_eq!(base.get("run", "precision"), Some("32"));
    }
}
