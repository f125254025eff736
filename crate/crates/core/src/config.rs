//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the
//! [`TrainConfig`] option names plus `train`, `val` and `out` for the data
//! and output paths. Later assignments of the same key win.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Applies one assignment, resolving relative paths against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || base.join(value.trim());
        match key {
            "train" => self.train_data = Some(path()),
            "val" => self.val_data = Some(path()),
            "out" => self.out_dir = Some(path()),
            _ => self.train.set_key(key, value)?,
        }
        Ok(())
    }

    /// Applies every assignment of a config file text.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        for (key, value, line) in parse_assignments(text, path)? {
            self.set(&key, &value, base).map_err(|e| Error::Line {
                path: path.to_path_buf(),
                line,
                detail: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// The configuration as a file that [`RunConfig::apply_file`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.train.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for (k, p) in [("train", &self.train_data), ("val", &self.val_data), ("out", &self.out_dir)] {
            if let Some(p) = p {
                s.push_str(&format!("{k} = {}\n", p.display()));
            }
        }
        s
    }
}

/// `(key, value, line number)` triples in file order.
pub fn parse_assignments(text: &str, path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("expected `key = value`, found {line:?}"),
            });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                detail: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}
