//! Strict `key = value` configuration shared by every command.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are an error that
//! names the key, so a printed config block always reproduces a run.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::AdaptationConfig;
use crate::selection::Strategy;

/// One parsed `key = value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "key `{key}` given twice (lines {} and {})",
                prev.line,
                i + 1
            )));
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_entries(&text)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// Hyperparameters every command understands.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GlobalConfig {
    pub adapt: AdaptationConfig,
}

impl GlobalConfig {
    pub const KEYS: [&'static str; 17] = [
        "resolution",
        "pool_k",
        "K",
        "budget_percent",
        "strategy",
        "semi",
        "lr0",
        "decay_power",
        "source_iters",
        "stage1_iters",
        "stage3_iters",
        "batch_size",
        "val_every",
        "augment",
        "kmeans_max_iters",
        "kmeans_tol",
        "seed",
    ];

    /// Applies one key. Returns `false` for keys this struct does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let a = &mut self.adapt;
        match key {
            "resolution" => a.resolution = parse_value(key, value)?,
            "pool_k" => a.pool_k = parse_value(key, value)?,
            "K" | "k" => a.k = parse_value(key, value)?,
            "budget_percent" => a.budget_percent = parse_value(key, value)?,
            "strategy" => {
                a.strategy = Strategy::from_str(value).map_err(|e| Error::Config(e.to_string()))?
            }
            "semi" => a.semi_enabled = parse_bool(key, value)?,
            "lr0" => a.lr0 = parse_value(key, value)?,
            "decay_power" => a.decay_power = parse_value(key, value)?,
            "source_iters" => a.source_iters = parse_value(key, value)?,
            "stage1_iters" => a.stage1_iters = parse_value(key, value)?,
            "stage3_iters" => a.stage3_iters = parse_value(key, value)?,
            "batch_size" => a.batch_size = parse_value(key, value)?,
            "val_every" => a.val_every = parse_value(key, value)?,
            "augment" => a.augment = parse_bool(key, value)?,
            "kmeans_max_iters" => a.kmeans_max_iters = parse_value(key, value)?,
            "kmeans_tol" => a.kmeans_tol = parse_value(key, value)?,
            "seed" => a.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Strict parse: every key must be known.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = GlobalConfig::default();
        for e in entries {
            if !cfg.apply(&e.key, &e.value)? {
                return Err(unknown_key(e));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        GlobalConfig::from_entries(&read_entries(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.adapt.validate().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        })
    }

    /// `key = value` lines that parse back to the same config.
    pub fn render(&self) -> String {
        let a = &self.adapt;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("resolution", a.resolution.to_string());
        put("pool_k", a.pool_k.to_string());
        put("K", a.k.to_string());
        put("budget_percent", a.budget_percent.to_string());
        put("strategy", a.strategy.to_string());
        put("semi", a.semi_enabled.to_string());
        put("lr0", a.lr0.to_string());
        put("decay_power", a.decay_power.to_string());
        put("source_iters", a.source_iters.to_string());
        put("stage1_iters", a.stage1_iters.to_string());
        put("stage3_iters", a.stage3_iters.to_string());
        put("batch_size", a.batch_size.to_string());
        put("val_every", a.val_every.to_string());
        put("augment", a.augment.to_string());
        put("kmeans_max_iters", a.kmeans_max_iters.to_string());
        put("kmeans_tol", a.kmeans_tol.to_string());
        put("seed", a.seed.to_string());
        s
    }
}

pub fn unknown_key(e: &Entry) -> Error {
    Error::Config(format!("unknown config key `{}` (line {})", e.key, e.line))
}
