//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys use the same
//! spelling as the command-line flags without the leading dashes:
//!
//! ```text
//! # tiny overfit run
//! blocks = 2
//! channels = 16
//! t = 8
//! iters = 3000
//! css = data/default_css.csv
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::AwanConfig;
use crate::train::TrainConfig;

/// Every recognized key.
pub const KEYS: &[&str] = &[
    "seed",
    "iters",
    "batch",
    "patch",
    "tau",
    "floor",
    "css",
    "blocks",
    "channels",
    "t",
    "r",
    "lr",
    "power",
    "ckpt-every",
    "self-ensemble",
    "fp64",
];

/// Splits the text into `(line, key, value)` entries. Duplicate keys and
/// lines without `=` are errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            line,
            msg: format!("expected `key = value`, found `{trimmed}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::ConfigSyntax { line, msg: "empty key".into() });
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::ConfigSyntax {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
        out.push((line, key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Model, training and inference settings assembled from defaults, an
/// optional file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: AwanConfig,
    pub train: TrainConfig,
    pub css: Option<PathBuf>,
    pub self_ensemble: bool,
    pub fp64: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: AwanConfig::default(),
            train: TrainConfig::default(),
            css: None,
            self_ensemble: false,
            fp64: false,
        }
    }
}

fn number<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

impl RunConfig {
    /// Sets one key. Does not validate cross-field constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.train.seed = number(key, value)?,
            "iters" => self.train.iterations = number(key, value)?,
            "batch" => self.train.batch = number(key, value)?,
            "patch" => self.train.patch = number(key, value)?,
            "tau" => self.train.loss.tau = number(key, value)?,
            "floor" => {
                self.train.loss.floor = match value {
                    "none" | "off" => None,
                    v => Some(number(key, v)?),
                }
            }
            "css" => self.css = Some(PathBuf::from(value)),
            "blocks" => self.model.blocks = number(key, value)?,
            "channels" => self.model.channels = number(key, value)?,
            "t" => self.model.awca_reduction = number(key, value)?,
            "r" => self.model.psnl_reduction = number(key, value)?,
            "lr" => self.train.lr0 = number(key, value)?,
            "power" => self.train.power = number(key, value)?,
            "ckpt-every" => self.train.ckpt_every = number(key, value)?,
            "self-ensemble" => self.self_ensemble = boolean(key, value)?,
            "fp64" => self.fp64 = boolean(key, value)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every entry of a config text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, key, value) in parse_pairs(text)? {
            self.set(&key, &value).map_err(|e| match e {
                Error::UnknownKey(_) | Error::InvalidValue { .. } => Error::ConfigSyntax {
                    line,
                    msg: e.to_string(),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
