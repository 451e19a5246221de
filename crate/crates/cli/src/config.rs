use std::fs;
use std::path::Path;

use anyhow::Context;
use pad_core::datastore::GenSpec;
use pad_core::padnet::PadConfig;
use pad_core::runtime::EvalSettings;
use pad_core::trainkit::TrainRun;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PadConfig,
    pub train: TrainRun,
    pub data: GenSpec,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: PadConfig::mini(),
            train: TrainRun::default(),
            data: GenSpec::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    /// Gives every seed in the config the same value.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.init_seed = seed;
        self.train.pretrain.seed = seed;
        self.train.adapt.seed = seed;
        self.eval.noise_seed = seed;
    }
}

/// Recursively overlays `patch` onto `base`; keys must already exist.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), UsageError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| UsageError(format!("unknown config key {sub:?}")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Applies one `dotted.key=value` override. The value is read as JSON when
/// it parses, otherwise as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), UsageError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--set expects key=value, got {spec:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| UsageError(format!("unknown config key {key:?}")))?;
    }
    if slot.is_object() {
        return Err(UsageError(format!("{key:?} is a section, not a value")));
    }
    *slot = value;
    Ok(())
}

/// Layers the config file, preset, overrides, seed and job count over the
/// defaults. A manifest written by an earlier run is accepted as a config
/// file.
pub fn resolve(
    file: Option<&Path>,
    preset: Option<&str>,
    sets: &[String],
    seed: Option<u64>,
    jobs: Option<usize>,
) -> anyhow::Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        if v.get("argv").is_some() {
            v = v.get("config").cloned().unwrap_or(Value::Null);
        }
        merge(&mut root, &v, "")?;
    }
    if let Some(p) = preset {
        let cfg = PadConfig::preset(p).map_err(|e| UsageError(e.to_string()))?;
        root["model"] = serde_json::to_value(cfg)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| UsageError(format!("config: {e}")))?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    let mut root = serde_json::to_value(&cfg)?;
    for s in sets {
        apply_override(&mut root, s)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| UsageError(format!("config: {e}")))?;
    if let Some(j) = jobs {
        if j == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        cfg.eval.jobs = j;
    }
    cfg.model.validate().map_err(|e| UsageError(e.to_string()))?;
    cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}
