//! Sectioned `key = value` text files shared by spec files and run configs.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {field}: {message}")]
pub struct KvError {
    /// 1-based; 0 when the problem is a missing entry.
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl KvError {
    pub fn new(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line,
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvDoc {
    pub sections: Vec<Section>,
}

impl KvDoc {
    /// `#` starts a comment. Keys may contain spaces (`0 1 = …`); repeated
    /// sections or keys are errors.
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut doc = KvDoc::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| KvError::new(line, body, "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(KvError::new(line, body, "empty section name"));
                }
                if let Some(prev) = doc.section(name) {
                    return Err(KvError::new(line, name, format!("section repeated (first at line {})", prev.line)));
                }
                doc.sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| KvError::new(line, body, "expected `key = value`"))?;
            let key = key.split_whitespace().collect::<Vec<_>>().join(" ");
            if key.is_empty() {
                return Err(KvError::new(line, body, "empty key"));
            }
            let section = doc
                .sections
                .last_mut()
                .ok_or_else(|| KvError::new(line, &key, "entry before any [section]"))?;
            if let Some(prev) = section.entries.iter().find(|e| e.key == key) {
                return Err(KvError::new(
                    line,
                    format!("{}.{}", section.name, key),
                    format!("key repeated (first at line {})", prev.line),
                ));
            }
            section.entries.push(Entry {
                key,
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section, KvError> {
        self.section(name)
            .ok_or_else(|| KvError::new(0, format!("[{name}]"), "missing section"))
    }

    /// Fails on any section outside `allowed`.
    pub fn only_sections(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.sections.iter().find(|s| !allowed.contains(&s.name.as_str())) {
            Some(s) => Err(KvError::new(s.line, format!("[{}]", s.name), "unknown section")),
            None => Ok(()),
        }
    }
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn field(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    pub fn require(&self, key: &str) -> Result<&Entry, KvError> {
        self.get(key)
            .ok_or_else(|| KvError::new(self.line, self.field(key), "missing key"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, KvError>
    where
        T::Err: fmt::Display,
    {
        let e = self.require(key)?;
        e.value
            .parse()
            .map_err(|err| KvError::new(e.line, self.field(key), format!("bad value `{}`: {err}", e.value)))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError>
    where
        T::Err: fmt::Display,
    {
        if self.get(key).is_some() {
            self.parse(key)
        } else {
            Ok(default)
        }
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, KvError>
    where
        T::Err: fmt::Display,
    {
        let e = self.require(key)?;
        parse_row(&e.value).map_err(|m| KvError::new(e.line, self.field(key), m))
    }

    /// Fails on any key outside `allowed`.
    pub fn only_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.entries.iter().find(|e| !allowed.contains(&e.key.as_str())) {
            Some(e) => Err(KvError::new(e.line, self.field(&e.key), "unknown key")),
            None => Ok(()),
        }
    }
}

/// Whitespace-separated values.
pub fn parse_row<T: FromStr>(text: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    text.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|e| format!("bad number `{t}`: {e}")))
        .collect()
}
