//! Plain-text `key = value` files with optional `[section]` headers.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique per
//! section; a repeated key is an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvSection {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvSection {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| Error::Parse {
                line: *line,
                msg: format!("{key}: {e}"),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.parse(key)?
            .ok_or_else(|| Error::invalid(format!("missing key `{key}`")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Errors on the first key not in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("unknown key `{k}`"),
                });
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parsed file: the unnamed leading section is stored under `""`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    sections: BTreeMap<String, KvSection>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, KvSection> = BTreeMap::new();
        let mut current = String::new();
        sections.insert(current.clone(), KvSection::default());
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                if sections.contains_key(&current) && !current.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("duplicate section [{current}]"),
                    });
                }
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            let section = sections.get_mut(&current).expect("section inserted above");
            if section.entries.insert(k.clone(), (line_no, v)).is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&KvSection> {
        self.sections.get(name).filter(|s| !s.is_empty() || name.is_empty())
    }

    pub fn root(&self) -> &KvSection {
        &self.sections[""]
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections
            .iter()
            .filter(|(k, _)| !k.is_empty())
            .map(|(k, _)| k.as_str())
    }
}
