//! Run configuration: a preset, overlaid by a TOML file, overlaid by dotted
//! `key=value` overrides. Unknown keys are rejected.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use dagpredict::model::ModelConfig;
use dagpredict::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Accuracy,
    Latency,
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" => Ok(Preset::Accuracy),
            "latency" => Ok(Preset::Latency),
            _ => bail!("unknown preset `{s}` (expected accuracy or latency)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Train / validation / test fractions of the data file.
    pub split: (f64, f64, f64),
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { split: (0.8, 0.2, 0.0), split_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Accuracy => (ModelConfig::accuracy(), TrainConfig::accuracy()),
            Preset::Latency => (ModelConfig::latency(), TrainConfig::latency()),
        };
        Self { preset, model, train, data: DataConfig::default() }
    }

    /// Preset (flag, else the file's `preset` key, else accuracy), then the
    /// file, then each `key=value` override in order.
    pub fn load(file: Option<&Path>, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        let file_value = match file {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let t: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                serde_json::to_value(t)?
            }
            None => Value::Object(Map::new()),
        };
        let preset = match (preset, file_value.get("preset")) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(v)) => bail!("preset must be a string, got {v}"),
            (None, None) => Preset::Accuracy,
        };
        let mut base = serde_json::to_value(Self::preset(preset))?;
        merge(&mut base, &file_value, "")?;
        base["preset"] = serde_json::to_value(preset)?;
        for o in overrides {
            apply_override(&mut base, o)?;
        }
        let cfg: Self = serde_json::from_value(base).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let (a, b, c) = self.data.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || a + b + c > 1.0 + 1e-12 || a <= 0.0 {
            bail!("data.split ({a}, {b}, {c}) must be fractions summing to at most 1 with a non-empty train part");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        set_path(&mut v, key, value)?;
        *self = serde_json::from_value(v).with_context(|| format!("invalid value for {key}"))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

fn merge(base: &mut Value, over: &Value, prefix: &str) -> Result<()> {
    let Value::Object(over) = over else { return Ok(()) };
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = base.get_mut(k.as_str()).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        match (slot.is_object(), v.is_object()) {
            (true, true) => merge(slot, v, &key)?,
            (false, false) => *slot = v.clone(),
            _ => bail!("config key `{key}` has the wrong kind of value"),
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut slot = root;
    for part in key.split('.') {
        slot = slot.get_mut(part).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    if slot.is_object() {
        bail!("config key `{key}` is a table; set one of its fields");
    }
    *slot = value;
    Ok(())
}

/// `a.b.c=value`, where the value is a TOML literal or else a bare string.
fn apply_override(root: &mut Value, text: &str) -> Result<()> {
    let (key, raw) = text.split_once('=').ok_or_else(|| anyhow!("override `{text}` is not key=value"))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key"))?,
        Err(_) => Value::String(raw.to_string()),
    };
    set_path(root, key, value)
}
