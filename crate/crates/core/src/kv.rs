//! Sectioned `key = value` text format used for configs and checkpoint headers.
//!
//! ```text
//! # comment
//! [model]
//! embed_dim = 32
//! ```
//!
//! Keys before any section header belong to the unnamed section `""`.

use std::cell::Cell;
use std::fmt::{Display, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug)]
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
    used: Cell<bool>,
}

#[derive(Debug, Default)]
pub struct KvDoc {
    entries: Vec<Entry>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse(format!("line {}: unterminated section header", i + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", i + 1)));
            }
            if entries.iter().any(|e| e.section == section && e.key == key) {
                return Err(Error::Parse(format!("line {}: duplicate key `{section}.{key}`", i + 1)));
            }
            entries.push(Entry {
                section: section.clone(),
                key,
                value: v.trim().to_string(),
                line: i + 1,
                used: Cell::new(false),
            });
        }
        Ok(Self { entries })
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.section == section && e.key == key).map(|e| {
            e.used.set(true);
            e.value.as_str()
        })
    }

    /// Parses `section.key` if present, otherwise returns `default`.
    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => parse_value(section, key, v),
        }
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self
            .get(section, key)
            .ok_or_else(|| Error::Config(format!("missing key `{section}.{key}`")))?;
        parse_value(section, key, v)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.entries.iter().any(|e| e.section == section)
    }

    /// Errors on any key that was never looked up.
    pub fn reject_unused(&self) -> Result<()> {
        let unused: Vec<String> = self
            .entries
            .iter()
            .filter(|e| !e.used.get())
            .map(|e| format!("`{}.{}` (line {})", e.section, e.key, e.line))
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unused.join(", "))))
        }
    }
}

fn parse_value<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("`{section}.{key}` = `{v}`: {e}")))
}

/// Parses a comma-separated list of `n` values.
pub fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::Config(format!("{what}: `{s}`: {e}"))))
        .collect()
}

pub fn parse_array<const N: usize, T: FromStr + Copy + Default>(text: &str, what: &str) -> Result<[T; N]>
where
    T::Err: Display,
{
    let v: Vec<T> = parse_list(text, what)?;
    if v.len() != N {
        return Err(Error::Config(format!("{what}: expected {N} values, got {}", v.len())));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&v);
    Ok(out)
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Builds canonical text: sections in insertion order, one `key = value` per line.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
        self
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}
