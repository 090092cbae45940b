//! Flat `key = value` config files. `#` starts a comment; blank lines are
//! ignored. Every key must be consumed by the reader, otherwise it is
//! reported as unknown.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KvFile {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |reason: String| Error::ConfigSyntax {
                path: path.clone(),
                line: line_no,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(syntax("empty key".into()));
            }
            if entries
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(syntax(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { path, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Removes `key` and parses it, leaving `target` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, value)) = self.entries.remove(key) {
            *target = value.parse().map_err(|e: T::Err| Error::ConfigSyntax {
                path: self.path.clone(),
                line,
                reason: format!("bad value for `{key}`: {e}"),
            })?;
        }
        Ok(())
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::ConfigSyntax {
                path: self.path,
                line,
                reason: format!("unknown key `{key}`"),
            }),
        }
    }
}
