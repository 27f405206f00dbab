//! Plain-text `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are dotted (`loss.margin`, `optim.seed`, ...) and unknown keys are
//! rejected with a line number so typos never silently fall back to a
//! default.

use std::path::Path;

use thiserror::Error;

use crate::model::Aggregator;
use crate::synthgen::OrchardSpec;
use crate::training::TrainSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
}

/// Parsed assignments in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(ConfigError::Malformed {
                line,
                text: raw.trim().to_string(),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Malformed {
                line,
                text: raw.trim().to_string(),
            });
        }
        if !seen.insert(key.clone()) {
            return Err(ConfigError::DuplicateKey { line, key });
        }
        out.push((key, value, line));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(
    key: &str,
    value: &str,
    line: usize,
    reason: &str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
            reason: "expected true/false".to_string(),
        }),
    }
}

fn parse_usize_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|part| parse_value(key, part.trim(), line, "expected comma-separated integers"))
        .collect()
}

/// Training settings from `key = value` text, starting from defaults.
pub fn train_settings_from_str(text: &str) -> Result<TrainSettings, ConfigError> {
    let mut s = TrainSettings::default();
    for (key, value, line) in parse_kv(text)? {
        let (k, v) = (key.as_str(), value.as_str());
        match k {
            "model.local_dim" => s.model.local_dim = parse_value(k, v, line, "integer")?,
            "model.descriptor_dim" => s.model.descriptor_dim = parse_value(k, v, line, "integer")?,
            "model.pointnet_hidden" => s.model.pointnet_hidden = parse_usize_list(k, v, line)?,
            "model.slc_hidden" => s.model.slc_hidden = parse_usize_list(k, v, line)?,
            "model.aggregator" => {
                s.model.aggregator =
                    v.parse::<Aggregator>().map_err(|e| ConfigError::InvalidValue {
                        line,
                        key: key.clone(),
                        value: value.clone(),
                        reason: e.to_string(),
                    })?
            }
            "mining.r_th" => s.mining.r_th = parse_value(k, v, line, "number")?,
            "mining.anchor_min_spacing" => {
                s.mining.anchor_min_spacing = parse_value(k, v, line, "number")?
            }
            "mining.num_negatives" => s.mining.num_negatives = parse_value(k, v, line, "integer")?,
            "mining.revisit_exclusion_window" => {
                s.mining.revisit_exclusion_window = parse_value(k, v, line, "integer")?
            }
            "mining.eval_radius" => s.mining.eval_radius = parse_value(k, v, line, "number")?,
            "mining.seed" => s.mining.seed = parse_value(k, v, line, "integer")?,
            "loss.margin" => s.loss.margin = parse_value(k, v, line, "number")?,
            "loss.alpha" => s.loss.alpha = parse_value(k, v, line, "number")?,
            "loss.slc_enabled" => s.loss.slc_enabled = parse_bool(k, v, line)?,
            "optim.learning_rate" => s.optim.learning_rate = parse_value(k, v, line, "number")?,
            "optim.weight_decay" => s.optim.weight_decay = parse_value(k, v, line, "number")?,
            "optim.beta1" => s.optim.beta1 = parse_value(k, v, line, "number")?,
            "optim.beta2" => s.optim.beta2 = parse_value(k, v, line, "number")?,
            "optim.epsilon" => s.optim.epsilon = parse_value(k, v, line, "number")?,
            "optim.max_epochs" => s.optim.max_epochs = parse_value(k, v, line, "integer")?,
            "optim.patience" => s.optim.patience = parse_value(k, v, line, "integer")?,
            "optim.seed" => s.optim.seed = parse_value(k, v, line, "integer")?,
            "train.num_points" => s.num_points = parse_value(k, v, line, "integer")?,
            "train.augment" => s.augment = parse_bool(k, v, line)?,
            "train.max_tuples_per_epoch" => {
                s.max_tuples_per_epoch = parse_value(k, v, line, "integer")?
            }
            _ => return Err(ConfigError::UnknownKey { line, key }),
        }
    }
    Ok(s)
}

/// Orchard generator spec from `key = value` text, starting from defaults.
pub fn orchard_spec_from_str(text: &str) -> Result<OrchardSpec, ConfigError> {
    let mut s = OrchardSpec::default();
    for (key, value, line) in parse_kv(text)? {
        let (k, v) = (key.as_str(), value.as_str());
        match k {
            "rows" => s.rows = parse_value(k, v, line, "integer")?,
            "row_length" => s.row_length = parse_value(k, v, line, "number")?,
            "row_spacing" => s.row_spacing = parse_value(k, v, line, "number")?,
            "trees_per_row" => s.trees_per_row = parse_value(k, v, line, "integer")?,
            "points_per_tree" => s.points_per_tree = parse_value(k, v, line, "integer")?,
            "noise_sigma" => s.noise_sigma = parse_value(k, v, line, "number")?,
            "laps" => s.laps = parse_value(k, v, line, "integer")?,
            "scan_spacing" => s.scan_spacing = parse_value(k, v, line, "number")?,
            "sensor_range" => s.sensor_range = parse_value(k, v, line, "number")?,
            "seed" => s.seed = parse_value(k, v, line, "integer")?,
            _ => return Err(ConfigError::UnknownKey { line, key }),
        }
    }
    Ok(s)
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_train_settings(path: &Path) -> Result<TrainSettings, ConfigError> {
    train_settings_from_str(&read(path)?)
}

pub fn load_orchard_spec(path: &Path) -> Result<OrchardSpec, ConfigError> {
    orchard_spec_from_str(&read(path)?)
}
