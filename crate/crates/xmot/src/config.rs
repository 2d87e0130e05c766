//! Flat `key=value` configuration files and option layering.
//!
//! Every CLI subcommand resolves its options the same way: a built-in
//! default, overridden by a `--config` file entry, overridden by an
//! explicit command-line flag. [`Layers`] carries the file and flag maps
//! and hands out parsed values; the resolved ("effective") configuration is
//! echoed into each output directory with [`write_kv_file`] so runs are
//! self-describing.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parse `key=value` lines. `#`-prefixed lines and blank lines are
/// ignored; whitespace around keys and values is trimmed; a repeated key
/// keeps the last occurrence.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                ln + 1
            )));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", ln + 1)));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    parse_kv(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Write keys in sorted order, one `key=value` per line.
pub fn write_kv_file(path: &Path, map: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing config {}", path.display()), e))
}

/// Configuration sources in increasing precedence: file, then flags.
#[derive(Debug, Default, Clone)]
pub struct Layers {
    file: BTreeMap<String, String>,
    flags: BTreeMap<String, String>,
}

impl Layers {
    pub fn new(file: BTreeMap<String, String>, flags: BTreeMap<String, String>) -> Self {
        Layers { file, flags }
    }

    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        Ok(Layers {
            file: match path {
                Some(p) => read_kv_file(p)?,
                None => BTreeMap::new(),
            },
            flags: BTreeMap::new(),
        })
    }

    /// Record a flag the user passed explicitly (highest precedence).
    pub fn set_flag(&mut self, key: &str, value: impl Display) {
        self.flags.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.flags
            .get(key)
            .or_else(|| self.file.get(key))
            .map(String::as_str)
    }

    /// Parse the layered value for `key`, or `None` when neither layer sets
    /// it. Parse failures name the key.
    pub fn get_parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::Config(format!("option {key}: cannot parse {raw:?}: {e}"))
            }),
        }
    }

    /// Overwrite `slot` when the layers set `key`.
    pub fn apply<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.get_parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Keys present in any layer — used to reject unknown options.
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        let mut keys: Vec<&str> = self
            .file
            .keys()
            .chain(self.flags.keys())
            .map(String::as_str)
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
    }

    /// Error if the file layer contains a key outside `known` — catches
    /// typos in config files early.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for k in self.file.keys() {
            if !known.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "unknown config key {k:?}; known keys: {}",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }
}
