//! Run directories. Every file written here carries the config it was
//! produced with: JSON files as a top-level `config` key, the learning curve
//! as `# key = value` header lines, checkpoints in their metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::train::TrainOutcome;

pub const METRICS: &str = "metrics.json";
pub const LEARNING_CURVE: &str = "learning_curve.csv";
pub const MONOMIALS: &str = "monomials.json";
pub const SELECTION_TRACE: &str = "selection_trace.json";
pub const MODEL: &str = "model.ckpt";
pub const BASELINE: &str = "baseline.ckpt";
pub const CONFIG: &str = "config.txt";

/// Writes `{"config": config, key: value}` as pretty JSON.
pub fn write_json_with_config<T: Serialize>(path: &Path, config: &TrainConfig, key: &str, value: &T) -> Result<()> {
    let mut obj = serde_json::Map::new();
    obj.insert("config".into(), serde_json::to_value(config)?);
    obj.insert(key.into(), serde_json::to_value(value)?);
    fs::write(path, serde_json::to_string_pretty(&serde_json::Value::Object(obj))?)?;
    Ok(())
}

/// Writes every artifact of a training run into `dir` (created if needed)
/// and returns the paths in write order.
pub fn write_run(dir: &Path, outcome: &TrainOutcome, config: &TrainConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let path = dir.join(name);
        f(&path)?;
        written.push(path);
        Ok(())
    };
    put(CONFIG, &|p| Ok(fs::write(p, config.to_kv())?))?;
    put(METRICS, &|p| Ok(fs::write(p, serde_json::to_string_pretty(&outcome.metrics)?)?))?;
    put(LEARNING_CURVE, &|p| Ok(fs::write(p, outcome.metrics.to_csv())?))?;
    put(MODEL, &|p| checkpoint::save(p, &outcome.model, Some(config)))?;
    if let Some(b) = &outcome.baseline {
        put(BASELINE, &|p| checkpoint::save(p, b, Some(config)))?;
    }
    if let Some(state) = outcome.ii_state() {
        put(MONOMIALS, &|p| write_json_with_config(p, config, "monomials", &state.monomials))?;
    }
    if let Some(trace) = &outcome.trace {
        put(SELECTION_TRACE, &|p| write_json_with_config(p, config, "trace", trace))?;
    }
    Ok(written)
}

/// Recovers the config embedded in any file written by this module (or by
/// [`write_json_with_config`]).
pub fn embedded_config(path: &Path) -> Result<TrainConfig> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".ckpt") {
        return checkpoint::load(path)?
            .1
            .ok_or_else(|| Error::Format { offset: 0, message: format!("{name}: checkpoint without config") });
    }
    let text = fs::read_to_string(path)?;
    if name.ends_with(".json") {
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let cfg = v.get("config").ok_or_else(|| Error::Format { offset: 0, message: format!("{name}: no config key") })?;
        return Ok(serde_json::from_value(cfg.clone())?);
    }
    if name.ends_with(".csv") {
        let header: String = text.lines().filter_map(|l| l.strip_prefix("# ")).map(|l| format!("{l}\n")).collect();
        return TrainConfig::parse_str(&header);
    }
    TrainConfig::parse_str(&text)
}
