//! Flat key=value run configuration with a fixed schema.
//!
//! Config files hold one `section.key = value` pair per line with `#`
//! comments. Every key has a built-in default; unknown keys are rejected
//! with the offending line number. Precedence is CLI flag over file value
//! over default, and every command echoes the fully resolved table to
//! `config.resolved` in its output directory, so a run is reproducible from
//! its artifacts alone.

use crate::CliError;
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// Every key with its built-in default. An empty default means "unset";
/// commands that require the key reject the empty value by name.
pub const SCHEMA: &[(&str, &str)] = &[
    // Synthetic corpus shape.
    ("corpus.style", "trimmed"),
    ("corpus.classes", "4"),
    ("corpus.phases", "3"),
    ("corpus.kind", "features"),
    ("corpus.dim", "8"),
    ("corpus.channels", "3"),
    ("corpus.height", "16"),
    ("corpus.width", "16"),
    ("corpus.sigma", "0.5"),
    ("corpus.min_frames", "30"),
    ("corpus.max_frames", "60"),
    ("corpus.videos_per_class", "20"),
    ("corpus.split", "train"),
    ("corpus.prefix", "vid"),
    ("corpus.fps", "1"),
    ("corpus.signals", "cyclic"),
    // "auto" picks 0/1 for feature corpora and 128/30 for pixel grids.
    ("corpus.signal_offset", "auto"),
    ("corpus.signal_scale", "auto"),
    // Untrimmed style only.
    ("corpus.fraction_min", "0.05"),
    ("corpus.fraction_max", "0.4"),
    ("corpus.background_pool", "6"),
    // Model: segments, hidden widths, aggregator, input handling.
    ("model.segments", "3"),
    ("model.hidden", "64,64"),
    ("model.aggregator", "average"),
    ("model.top_k", "3"),
    ("model.modality", "features"),
    ("model.stack_len", "5"),
    ("model.dropout", "0"),
    ("model.bn", "true"),
    // Spatial augmentation for grid corpora; empty crop set disables it.
    ("model.crop_sizes", ""),
    ("model.crop_output", "8"),
    ("model.flip_prob", "0.5"),
    // Optimization.
    ("train.lr", "0.1"),
    ("train.momentum", "0.9"),
    ("train.batch", "16"),
    ("train.epochs", "10"),
    ("train.seed", "7"),
    ("train.partial_bn", "false"),
    ("train.alternating_omega", "false"),
    ("train.decay", "0.1"),
    // Iteration indices; empty means decay at 2/3 and 8/9 of the run.
    ("train.decay_points", ""),
    // Test-time protocol.
    ("eval.protocol", "trimmed"),
    ("eval.snippets", "25"),
    ("eval.crops", "1"),
    ("eval.consensus", "average"),
    // Per-checkpoint fusion weights; empty means uniform.
    ("eval.fusion", ""),
    ("eval.scales", "1,2,4,8,16"),
    ("eval.fps", "1"),
    // Input/output locations; flags override these.
    ("paths.data", ""),
    ("paths.out", ""),
    ("paths.checkpoint", ""),
    // Worker cap shared by training and evaluation.
    ("threads", "1"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: SCHEMA
                .iter()
                .map(|&(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Defaults overlaid with the file's pairs, when a file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::defaults();
        let Some(path) = path else { return Ok(cfg) };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        for (number, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    number + 1
                )));
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| {
                CliError::Config(format!("{}:{}: {e}", path.display(), number + 1))
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        if !SCHEMA.iter().any(|&(k, _)| k == key) {
            return Err(CliError::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from schema"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse().map_err(|e| {
            CliError::Config(format!("{key}: cannot parse `{raw}`: {e}"))
        })
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(CliError::Config(format!(
                "{key}: expected `true` or `false`, got `{other}`"
            ))),
        }
    }

    /// Comma-separated list; the empty string is an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse().map_err(|e| {
                    CliError::Config(format!("{key}: cannot parse `{item}`: {e}"))
                })
            })
            .collect()
    }

    /// The full table in schema order, one `key = value` line each.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for &(key, _) in SCHEMA {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(self.get(key));
            out.push('\n');
        }
        out
    }
}
