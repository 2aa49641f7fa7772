//! Line-oriented `key=value` config text with optional `[section]` headers.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are matched
//! exactly; values are trimmed. Every entry remembers its 1-based line so
//! parse errors can point at the offending line.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String, usize)>,
}

impl KeyValues {
    pub fn insert(&mut self, key: &str, value: &str, line: usize) {
        self.entries.retain(|(k, _, _)| k != key);
        self.entries.push((key.to_string(), value.to_string(), line));
    }

    /// Overlay `other`; its entries win.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v, l) in &other.entries {
            self.insert(k, v, *l);
        }
    }

    pub fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (*l, v.as_str()))
    }

    pub fn get_parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|e| Error::Parse {
                line,
                msg: format!("bad value {v:?} for {key}: {e}"),
            }),
        }
    }

    /// Comma-separated list value.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>().map_err(|e| Error::Parse {
                        line,
                        msg: format!("bad list item {s:?} for {key}: {e}"),
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Reject keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (k, _, line) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("unknown key {k:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub values: KeyValues,
}

/// Parse text with no section headers.
pub fn parse_key_values(text: &str) -> Result<KeyValues> {
    let sections = parse_sections(text)?;
    match sections.as_slice() {
        [] => Ok(KeyValues::default()),
        [only] if only.name.is_empty() => Ok(only.values.clone()),
        [_, second, ..] | [second] => Err(Error::Parse {
            line: second.line,
            msg: "section headers are not allowed here".into(),
        }),
    }
}

/// Parse text into sections. Entries before the first header land in a
/// section with an empty name.
pub fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                line,
                msg: format!("unterminated section header {trimmed:?}"),
            })?;
            sections.push(Section {
                name: name.trim().to_string(),
                line,
                values: KeyValues::default(),
            });
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected key=value, got {trimmed:?}"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty key".into(),
            });
        }
        if sections.is_empty() {
            sections.push(Section {
                name: String::new(),
                line,
                values: KeyValues::default(),
            });
        }
        sections
            .last_mut()
            .expect("non-empty")
            .values
            .insert(key, value.trim(), line);
    }
    Ok(sections)
}
